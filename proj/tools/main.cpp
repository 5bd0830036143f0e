#include "etchvm/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv, argv + argc);
    return etchvm::run_cli(args, std::cout, std::cerr);
}
