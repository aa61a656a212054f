#include "rawdn/cli.hpp"

int main(int argc, char** argv) { return rawdn::cli::run(argc, argv); }
