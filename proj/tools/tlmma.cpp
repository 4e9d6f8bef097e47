#include "tlmma/cli.hpp"

int main(int argc, char** argv) { return tlmma::cli::main(argc, argv); }
