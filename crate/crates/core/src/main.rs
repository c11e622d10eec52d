fn main() {
    std::process::exit(tdm_edit::cli::run(std::env::args_os()));
}
