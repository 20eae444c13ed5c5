#include <iostream>

#include "airseg/cli.hpp"

int main(int argc, char** argv) { return airseg::run_cli(argc, argv, std::cout, std::cerr); }
