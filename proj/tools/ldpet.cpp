#include "ldpet/cli.hpp"

int main(int argc, char** argv) { return ldpet::cli::run(argc, argv); }
