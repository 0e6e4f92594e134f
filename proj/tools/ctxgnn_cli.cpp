#include "ctxgnn/cli.hpp"

int main(int argc, char** argv) { return ctxgnn::cli::run(argc, argv); }
