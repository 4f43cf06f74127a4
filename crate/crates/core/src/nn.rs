//! Desk-scale convolutional backbone, sigmoid classifier head, and
//! class-activation-map attention.
//!
//! The head is GAP-then-linear so the attention map of attribute m,
//! A_m(x,y) = Σ_c W[m,c]·F_c(x,y), is the exact decomposition of that
//! attribute's logit: mean_{x,y} A_m = z_m − bias_m.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ReduceKind, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSCCKPT1";

/// Backbone/head geometry. Kernel size is fixed at 3x3 with padding 1;
/// the first three blocks use stride 2, any further blocks stride 1.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub num_attributes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            channels: vec![16, 32, 32, 32],
            num_attributes: 8,
        }
    }
}

fn stride_for_block(index: usize) -> usize {
    if index < 3 {
        2
    } else {
        1
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub kernel: Tensor, // (cout, cin, 3, 3)
    pub bias: Tensor,   // (cout)
    pub stride: usize,
}

/// Linear head over globally averaged features; weight row m is the same
/// vector that projects feature maps into attribute m's attention map.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub weight: Tensor, // (M, C)
    pub bias: Tensor,   // (M)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub blocks: Vec<ConvBlock>,
    pub head: ClassifierHead,
}

/// Tape handles for every parameter of a registered model.
pub struct ModelVars {
    pub blocks: Vec<(Var, Var)>,
    pub head_weight: Var,
    pub head_bias: Var,
}

fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl Model {
    /// Fresh model with fan-in-scaled uniform kernels and zero biases.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut gen = rng::stream(seed, 0x6d6f64656c); // "model"
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut cin = cfg.in_channels;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let fan_in = cin * 9;
            blocks.push(ConvBlock {
                kernel: fan_in_uniform(&mut gen, &[cout, cin, 3, 3], fan_in),
                bias: Tensor::zeros(&[cout]),
                stride: stride_for_block(i),
            });
            cin = cout;
        }
        let head = ClassifierHead {
            weight: fan_in_uniform(&mut gen, &[cfg.num_attributes, cin], cin),
            bias: Tensor::zeros(&[cfg.num_attributes]),
        };
        Model { blocks, head }
    }

    pub fn num_attributes(&self) -> usize {
        self.head.weight.shape()[0]
    }

    pub fn feature_channels(&self) -> usize {
        self.head.weight.shape()[1]
    }

    /// Parameters in checkpoint order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.block{i}.kernel"), &b.kernel));
            out.push((format!("backbone.block{i}.bias"), &b.bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.kernel);
            out.push(&mut b.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Register all parameters on a tape as gradient leaves.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Result<ModelVars> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push((
                tape.leaf(&b.kernel, requires_grad)?,
                tape.leaf(&b.bias, requires_grad)?,
            ));
        }
        Ok(ModelVars {
            blocks,
            head_weight: tape.leaf(&self.head.weight, requires_grad)?,
            head_bias: tape.leaf(&self.head.bias, requires_grad)?,
        })
    }

    /// Backbone forward: (b,3,h,w) → (b,C,H,W) feature maps.
    pub fn forward_features(&self, tape: &mut Tape, vars: &ModelVars, images: Var) -> Result<Var> {
        let mut x = images;
        for (block, &(kernel, bias)) in self.blocks.iter().zip(&vars.blocks) {
            x = tape.conv2d(x, kernel, block.stride, 1)?;
            let cout = tape.shape(bias)[0];
            let b3 = tape.reshape(bias, &[cout, 1, 1])?;
            x = tape.add(x, b3)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    /// GAP-then-linear head: z = GAP(F)·Wᵀ + bias, p = σ(z).
    pub fn classify(&self, tape: &mut Tape, vars: &ModelVars, features: Var) -> Result<(Var, Var)> {
        let gap = tape.reduce(features, ReduceKind::Mean, &[2, 3])?;
        let wt = tape.transpose(vars.head_weight)?;
        let zw = tape.matmul(gap, wt)?;
        let z = tape.add(zw, vars.head_bias)?;
        let p = tape.sigmoid(z)?;
        Ok((z, p))
    }

    /// Signed attention maps A[b,m,y,x] = Σ_c W[m,c]·F[b,c,y,x]; the head
    /// bias is deliberately absent.
    pub fn compute_cams(&self, tape: &mut Tape, vars: &ModelVars, features: Var) -> Result<Var> {
        tape.project_channels(vars.head_weight, features)
    }
}

// ---- checkpoint container ----------------------------------------------------

fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(u32::from_le_bytes(buf))
}

/// Write named tensors: magic, then per-parameter records of
/// (name length, name, shape rank, extents, little-endian f32 data).
pub fn save_checkpoint(path: &Path, params: &[(String, &Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    for (name, tensor) in params {
        write_u32(&mut w, name.len() as u32, path)?;
        w.write_all(name.as_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        write_u32(&mut w, tensor.rank() as u32, path)?;
        for &d in tensor.shape() {
            write_u32(&mut w, d as u32, path)?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(format!("flushing {}", path.display()), e))
}

/// Read back every record of a checkpoint container.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = std::fs::File::open(path)
        .map_err(|_| Error::MissingCheckpoint(path.display().to_string()))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            file: path.display().to_string(),
            detail: "bad magic, not a checkpoint file".into(),
        });
    }
    let mut out = Vec::new();
    loop {
        let mut peek = [0u8; 4];
        match r.read_exact(&mut peek) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
        }
        let name_len = u32::from_le_bytes(peek) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let name = String::from_utf8(name_buf).map_err(|_| Error::Format {
            file: path.display().to_string(),
            detail: "parameter name is not utf-8".into(),
        })?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut fbuf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut fbuf)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            data.push(f32::from_le_bytes(fbuf) as f64);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.named_parameters())
    }

    /// Rebuild a model from a checkpoint. Block strides follow the fixed
    /// rule (stride 2 for the first three blocks).
    pub fn load(path: &Path) -> Result<Self> {
        let records = load_checkpoint(path)?;
        let lookup = |name: &str| -> Result<Tensor> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format {
                    file: path.display().to_string(),
                    detail: format!("missing parameter '{name}'"),
                })
        };
        let n_blocks = records
            .iter()
            .filter(|(n, _)| n.starts_with("backbone.block") && n.ends_with(".kernel"))
            .count();
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let kernel = lookup(&format!("backbone.block{i}.kernel"))?;
            let bias = lookup(&format!("backbone.block{i}.bias"))?;
            if kernel.rank() != 4 || bias.rank() != 1 || kernel.shape()[0] != bias.shape()[0] {
                return Err(Error::Format {
                    file: path.display().to_string(),
                    detail: format!("inconsistent shapes for block {i}"),
                });
            }
            blocks.push(ConvBlock {
                kernel,
                bias,
                stride: stride_for_block(i),
            });
        }
        let head = ClassifierHead {
            weight: lookup("head.weight")?,
            bias: lookup("head.bias")?,
        };
        Ok(Model { blocks, head })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_tensors(model: &Model, images: &Tensor) -> (Tensor, Tensor, Tensor, Tensor) {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, false).unwrap();
        let img = tape.constant(images).unwrap();
        let feats = model.forward_features(&mut tape, &vars, img).unwrap();
        let (z, p) = model.classify(&mut tape, &vars, feats).unwrap();
        let cams = model.compute_cams(&mut tape, &vars, feats).unwrap();
        (
            tape.to_tensor(feats),
            tape.to_tensor(z),
            tape.to_tensor(p),
            tape.to_tensor(cams),
        )
    }

    #[test]
    fn default_geometry_is_8x6x32() {
        let model = Model::new(&ModelConfig::default(), 1);
        let images = Tensor::zeros(&[2, 3, 64, 48]);
        let (feats, z, _, cams) = forward_tensors(&model, &images);
        assert_eq!(feats.shape(), &[2, 32, 8, 6]);
        assert_eq!(z.shape(), &[2, 8]);
        assert_eq!(cams.shape(), &[2, 8, 8, 6]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let model = Model::new(&ModelConfig::default(), 3);
        let images = Tensor::zeros(&[1, 3, 64, 48]);
        let (feats, _, _, _) = forward_tensors(&model, &images);
        assert!(feats.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_of_two_equals_two_batches_of_one() {
        let model = Model::new(&ModelConfig::default(), 5);
        let mut gen = rng::stream(9, 1);
        let both = Tensor::from_fn(&[2, 3, 64, 48], |_| gen.gen_range(0.0..1.0));
        let half = 3 * 64 * 48;
        let first = Tensor::new(vec![1, 3, 64, 48], both.data()[..half].to_vec()).unwrap();
        let second = Tensor::new(vec![1, 3, 64, 48], both.data()[half..].to_vec()).unwrap();
        let (f_both, z_both, _, _) = forward_tensors(&model, &both);
        let (f1, z1, _, _) = forward_tensors(&model, &first);
        let (f2, z2, _, _) = forward_tensors(&model, &second);
        let concat_f: Vec<f64> = f1.data().iter().chain(f2.data()).copied().collect();
        let concat_z: Vec<f64> = z1.data().iter().chain(z2.data()).copied().collect();
        assert_eq!(f_both.data(), concat_f.as_slice());
        assert_eq!(z_both.data(), concat_z.as_slice());
    }

    fn toy_head_model(weight: Tensor, bias: Tensor) -> Model {
        Model {
            blocks: vec![],
            head: ClassifierHead { weight, bias },
        }
    }

    #[test]
    fn classify_constant_features_hand_value() {
        // F constant 1 over space, W_m = (1,2,3), bias 0 → z_m = 6.
        let model = toy_head_model(
            Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(),
            Tensor::zeros(&[1]),
        );
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, false).unwrap();
        let feats = tape.constant(&Tensor::full(&[1, 3, 2, 2], 1.0)).unwrap();
        let (z, p) = model.classify(&mut tape, &vars, feats).unwrap();
        assert!((tape.data(z)[0] - 6.0).abs() < 1e-12);
        assert!(tape.data(p)[0] > 0.99);

        // W = 0, bias 0 → p = 0.5 everywhere
        let model = toy_head_model(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, false).unwrap();
        let feats = tape.constant(&Tensor::full(&[1, 3, 2, 2], 1.0)).unwrap();
        let (_, p) = model.classify(&mut tape, &vars, feats).unwrap();
        assert_eq!(tape.data(p), &[0.5, 0.5]);
    }

    #[test]
    fn cam_constant_features_hand_value() {
        let model = toy_head_model(
            Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(),
            Tensor::zeros(&[1]),
        );
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, false).unwrap();
        let feats = tape.constant(&Tensor::full(&[1, 3, 2, 2], 1.0)).unwrap();
        let cams = model.compute_cams(&mut tape, &vars, feats).unwrap();
        assert!(tape.data(cams).iter().all(|&v| (v - 6.0).abs() < 1e-12));
    }

    #[test]
    fn cam_spatial_mean_matches_logit_minus_bias() {
        let cfg = ModelConfig {
            in_channels: 3,
            channels: vec![8, 16],
            num_attributes: 4,
        };
        let mut model = Model::new(&cfg, 11);
        // non-zero bias so the subtraction is exercised
        model.head.bias = Tensor::new(vec![4], vec![0.3, -0.2, 0.1, 0.7]).unwrap();
        let mut gen = rng::stream(12, 2);
        let images = Tensor::from_fn(&[3, 3, 16, 12], |_| gen.gen_range(0.0..1.0));
        let (_, z, _, cams) = forward_tensors(&model, &images);
        let (b, m) = (3, 4);
        let plane = cams.len() / (b * m);
        for i in 0..b {
            for mi in 0..m {
                let start = (i * m + mi) * plane;
                let mean: f64 =
                    cams.data()[start..start + plane].iter().sum::<f64>() / plane as f64;
                let expect = z.data()[i * m + mi] - model.head.bias.data()[mi];
                assert!(
                    (mean - expect).abs() < 1e-6,
                    "cam/logit consistency: {mean} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn cams_match_bruteforce_triple_loop() {
        let mut gen = rng::stream(21, 3);
        let (b, c, m, h, w) = (2, 5, 3, 4, 3);
        let feats = Tensor::from_fn(&[b, c, h, w], |_| gen.gen_range(-1.0..1.0));
        let weight = Tensor::from_fn(&[m, c], |_| gen.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let wv = tape.constant(&weight).unwrap();
        let fv = tape.constant(&feats).unwrap();
        let cams = tape.project_channels(wv, fv).unwrap();
        let got = tape.to_tensor(cams);

        for i in 0..b {
            for mi in 0..m {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            acc += weight.data()[mi * c + ci]
                                * feats.data()[((i * c + ci) * h + y) * w + x];
                        }
                        let gv = got.data()[((i * m + mi) * h + y) * w + x];
                        assert!((acc - gv).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = Model::new(&ModelConfig::default(), 17);
        model.save(&path).unwrap();
        let reloaded = Model::load(&path).unwrap();

        for ((name, orig), (name2, re)) in model
            .named_parameters()
            .iter()
            .zip(reloaded.named_parameters().iter())
        {
            assert_eq!(name, name2);
            assert_eq!(orig.shape(), re.shape());
            for (&a, &b) in orig.data().iter().zip(re.data()) {
                assert_eq!(a as f32, b as f32, "param {name}");
            }
        }
        assert_eq!(reloaded.blocks[0].stride, 2);
        assert_eq!(reloaded.blocks[3].stride, 1);

        // second roundtrip is exact
        let path2 = dir.path().join("model2.bin");
        reloaded.save(&path2).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        assert!(matches!(
            Model::load(Path::new("/nonexistent/ckpt.bin")),
            Err(Error::MissingCheckpoint(_))
        ));
    }
}
