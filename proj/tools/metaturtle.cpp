#include <iostream>

#include "metaturtle/cli.hpp"

int main(int argc, char** argv) { return metaturtle::cli_main(argc, argv, std::cout, std::cerr); }
