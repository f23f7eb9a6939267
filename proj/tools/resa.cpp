#include "resa/cli.hpp"

int main(int argc, char** argv) {
    return resa::run_cli(argc, argv);
}
