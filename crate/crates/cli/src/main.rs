fn main() {
    std::process::exit(hpn_cli::run(std::env::args_os()));
}
