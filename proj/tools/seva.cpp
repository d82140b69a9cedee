#include "seva/cli.hpp"

int main(int argc, char** argv) { return seva::cli::main_entry(argc, argv); }
