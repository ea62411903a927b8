fn main() {
    std::process::exit(rem_diffusion::cli::main_with_args(std::env::args_os()));
}
