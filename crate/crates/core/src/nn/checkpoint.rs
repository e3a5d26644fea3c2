//! Checkpoint directories: `manifest.json` plus one kernel-format blob per
//! parameter. Linear weights are stored as `[1, 1, in, out]` and bias
//! vectors as `[1, 1, 1, n]`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conv2d, Layer, Linear, Network, Provenance};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor4, write_tensor4, DenseMatrix, Tensor4};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// `[height, width, channels]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerManifest {
    Conv2d {
        dims: [usize; 4],
        stride: usize,
        pad: usize,
        kernel: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        bias: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        provenance: Option<Provenance>,
    },
    Relu,
    Maxpool2,
    Flatten,
    Linear {
        fan_in: usize,
        fan_out: usize,
        weight: String,
        bias: String,
    },
}

fn write_blob(dir: &Path, name: &str, k: &Tensor4) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    write_tensor4(&mut w, k)?;
    w.flush()?;
    Ok(())
}

fn read_blob(dir: &Path, name: &str, expect: [usize; 4]) -> Result<Tensor4> {
    if name.contains('/') || name.contains('\\') {
        return Err(Error::Format(format!("blob name {name:?} must be a plain file name")));
    }
    let k = read_tensor4(BufReader::new(File::open(dir.join(name))?))?;
    if k.dims() != expect {
        return Err(Error::Format(format!("blob {name} has dims {:?}, manifest says {expect:?}", k.dims())));
    }
    Ok(k)
}

fn vector_blob(v: &[f64]) -> Tensor4 {
    Tensor4::from_vec([1, 1, 1, v.len()], v.to_vec()).expect("vector length matches")
}

pub fn save_network(net: &Network, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let entry = match layer {
            Layer::Conv2d(c) => {
                let kernel = format!("layer{i:02}.kernel.bin");
                write_blob(dir, &kernel, &c.kernel)?;
                let bias = match &c.bias {
                    Some(b) => {
                        let name = format!("layer{i:02}.bias.bin");
                        write_blob(dir, &name, &vector_blob(b))?;
                        Some(name)
                    }
                    None => None,
                };
                LayerManifest::Conv2d {
                    dims: c.kernel.dims(),
                    stride: c.stride,
                    pad: c.pad,
                    kernel,
                    bias,
                    provenance: c.provenance.clone(),
                }
            }
            Layer::Relu => LayerManifest::Relu,
            Layer::MaxPool2 => LayerManifest::Maxpool2,
            Layer::Flatten => LayerManifest::Flatten,
            Layer::Linear(l) => {
                let (fi, fo) = (l.weight.rows(), l.weight.cols());
                let weight = format!("layer{i:02}.weight.bin");
                let bias = format!("layer{i:02}.bias.bin");
                write_blob(dir, &weight, &Tensor4::from_vec([1, 1, fi, fo], l.weight.data().to_vec())?)?;
                write_blob(dir, &bias, &vector_blob(&l.bias))?;
                LayerManifest::Linear { fan_in: fi, fan_out: fo, weight, bias }
            }
        };
        layers.push(entry);
    }
    let manifest = Manifest { version: MANIFEST_VERSION, input: net.input_shape(), classes: net.classes(), layers };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}

pub fn load_network(dir: &Path) -> Result<Network> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let layer = match entry {
            LayerManifest::Conv2d { dims, stride, pad, kernel, bias, provenance } => {
                let k = read_blob(dir, kernel, *dims)?;
                let b = match bias {
                    Some(name) => Some(read_blob(dir, name, [1, 1, 1, dims[3]])?.into_data()),
                    None => None,
                };
                Layer::Conv2d(Conv2d { kernel: k, bias: b, stride: *stride, pad: *pad, provenance: provenance.clone() })
            }
            LayerManifest::Relu => Layer::Relu,
            LayerManifest::Maxpool2 => Layer::MaxPool2,
            LayerManifest::Flatten => Layer::Flatten,
            LayerManifest::Linear { fan_in, fan_out, weight, bias } => {
                let w = read_blob(dir, weight, [1, 1, *fan_in, *fan_out])?;
                let b = read_blob(dir, bias, [1, 1, 1, *fan_out])?;
                Layer::Linear(Linear {
                    weight: DenseMatrix::from_vec(*fan_in, *fan_out, w.into_data())?,
                    bias: b.into_data(),
                })
            }
        };
        layers.push(layer);
    }
    let net = Network::new(layers, manifest.input)?;
    if net.classes() != manifest.classes {
        return Err(Error::Format(format!(
            "manifest declares {} classes, layers produce {}",
            manifest.classes,
            net.classes()
        )));
    }
    Ok(net)
}
