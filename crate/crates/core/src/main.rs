fn main() {
    std::process::exit(mdp_spde_lab::cli::cli_main(std::env::args_os()));
}
