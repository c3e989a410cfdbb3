//! Checkpoints: a directory with `config.json` and one tensor file per
//! parameter, named after the parameter path (`stage0.block1.conv2.weight.fcrt`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    network: NetworkConfig,
    params: Vec<String>,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, net: &Network<f32>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = ConfigEcho {
        network: net.config().clone(),
        params: net.params().iter().map(|p| p.name.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&echo).expect("config serializes");
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    for p in net.params().iter() {
        write_tensor(dir.join(format!("{}.fcrt", p.name)), &p.value)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Network<f32>> {
    let dir = dir.as_ref();
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let echo: ConfigEcho = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    let mut net = Network::<f32>::new(echo.network, 0)?;
    let expected: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    if expected != echo.params {
        return Err(Error::parse(&path, "parameter list does not match the network config"));
    }
    for p in net.params_mut().iter_mut() {
        let file = dir.join(format!("{}.fcrt", p.name));
        let value = read_tensor(&file)?;
        if value.dims() != p.value.dims() {
            return Err(Error::Shape(format!(
                "{}: dims {:?}, expected {:?}",
                file.display(),
                value.dims(),
                p.value.dims()
            )));
        }
        p.value = value;
    }
    Ok(net)
}
