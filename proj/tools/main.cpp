#include "dacnet/cli.hpp"

int main(int argc, char** argv) { return dacnet::cli::run(argc, argv); }
