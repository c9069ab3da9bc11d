// Regenerates the checked-in expectations file from the seeded benchmarks.
#include <filesystem>
#include <fstream>
#include <iostream>

#include "regmerge/expectations.hpp"

int main(int argc, char** argv) {
    if (argc != 3) {
        std::cerr << "usage: regmerge-expectations <out.json> <scratch-dir>\n";
        return 2;
    }
    try {
        const auto j = regmerge::compute_expectations(argv[2]);
        std::ofstream(argv[1]) << j.dump(2) << '\n';
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
