#include <iostream>

#include "mmoe/cli.hpp"

int main(int argc, char** argv) { return mmoe::cli::run(argc, argv, std::cout, std::cerr); }
