use std::path::PathBuf;

use clap::Args;
use mergeforge::checkpoint::load_checkpoint;

use crate::error::CliResult;

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

pub fn run(args: &InspectArgs) -> CliResult<()> {
    let c = load_checkpoint(&args.ckpt)?;
    for (k, v) in c.meta() {
        println!("# {k} = {v}");
    }
    println!("name\tshape\tdtype\tchecksum");
    for (name, t) in c.tensors() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        println!("{name}\t{}\tf32\t{}", shape.join("x"), t.checksum());
    }
    println!("# {} tensors, {} parameters", c.len(), c.parameter_count());
    Ok(())
}
