#include <iostream>

#include <torch/torch.h>

#include "openseg/cli.hpp"

int main(int argc, char** argv) {
    // single-threaded kernels keep runs bit-reproducible
    torch::set_num_threads(1);
    return openseg::run_cli(argc, argv, std::cout, std::cerr);
}
