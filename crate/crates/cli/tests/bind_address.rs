use bias_lens_cli::cli::{Cli, Command, DEFAULT_ADDR};
use clap::Parser;

fn parsed_addr() -> String {
    match Cli::try_parse_from(["bias-lens", "serve", "--ckpt", "m.blens"]).unwrap().command {
        Command::Serve { addr, .. } => addr,
        other => panic!("{other:?}"),
    }
}

// One test in this binary, so changing the environment cannot race.
#[test]
fn env_var_overrides_the_default_address() {
    std::env::remove_var("BIASLENS_ADDR");
    assert_eq!(parsed_addr(), DEFAULT_ADDR);
    std::env::set_var("BIASLENS_ADDR", "0.0.0.0:9999");
    assert_eq!(parsed_addr(), "0.0.0.0:9999");
    let explicit = Cli::try_parse_from(["bias-lens", "serve", "--ckpt", "m", "--addr", "127.0.0.1:1"]).unwrap();
    assert!(matches!(explicit.command, Command::Serve { addr, .. } if addr == "127.0.0.1:1"));
    std::env::remove_var("BIASLENS_ADDR");
}
