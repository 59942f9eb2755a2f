#include "rlda/cli.hpp"

int main(int argc, char** argv) { return rlda::cli_main(argc, argv); }
