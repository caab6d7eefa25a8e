#include "satts/cli.hpp"

int main(int argc, char** argv) { return satts::cli::run(argc, argv); }
