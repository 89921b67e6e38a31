#include "cli_app.hpp"

int main(int argc, char** argv) { return smjd::cli::run(argc, argv); }
