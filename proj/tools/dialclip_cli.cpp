#include <iostream>

#include "dialclip/cli.hpp"

int main(int argc, char** argv) { return dialclip::run_cli(argc, argv, std::cout, std::cerr); }
