#include "lddpo/cli.hpp"

int main(int argc, char** argv) { return lddpo::cli::run(argc, argv); }
