#include "bdmesh/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
    bdmesh::cli::configure_logging();
    std::vector<std::string> args(argv + 1, argv + argc);
    return bdmesh::cli::run(args, std::cout, std::cerr);
}
