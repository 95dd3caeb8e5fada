#include "evoprompt/cli.hpp"

int main(int argc, char** argv) { return evoprompt::cli::run(argc, argv); }
