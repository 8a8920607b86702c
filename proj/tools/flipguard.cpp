#include "flipguard/cli.hpp"

int main(int argc, char** argv) { return flipguard::cli::execute(argc, argv); }
