#include "fablink/cli.hpp"

int main(int argc, char** argv) { return fablink::cli::main(argc, argv); }
