fn main() {
    std::process::exit(sdlm::cli::run());
}
