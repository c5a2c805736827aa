#include "skipless/cli.hpp"

int main(int argc, char** argv) { return skipless::cli::main_entry(argc, argv); }
