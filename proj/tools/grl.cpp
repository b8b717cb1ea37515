#include <iostream>

#include "grl/cli.hpp"

int main(int argc, char** argv) { return grl::cli_main(argc, argv, std::cout, std::cerr); }
