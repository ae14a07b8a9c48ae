#include "rairl/cli.hpp"

int main(int argc, char** argv) {
    return rairl::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
