#include "leafseg/cli/app.hpp"

int main(int argc, char** argv) { return leafseg::cli::run(argc, argv); }
