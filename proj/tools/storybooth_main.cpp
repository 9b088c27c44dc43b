#include "storybooth/cli.hpp"

int main(int argc, char** argv) { return storybooth::cli_main(argc, argv); }
