fn main() {
    std::process::exit(stochastic_mhd::montecarlo::cli(std::env::args().collect()));
}
