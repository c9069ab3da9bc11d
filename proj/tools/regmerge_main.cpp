#include <iostream>

#include "regmerge/cli.hpp"

int main(int argc, char** argv) {
    return regmerge::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
