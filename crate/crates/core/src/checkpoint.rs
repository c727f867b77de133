//! Flat binary checkpoints.
//!
//! Layout (all integers little-endian, all floats f64 little-endian):
//!
//! ```text
//! magic    4 bytes  "DBDG"
//! version  u32      1
//! net:     layer_count u32, input_dim u32,
//!          then per layer: out_dim u32, activation u8 (0 identity, 1 relu),
//!          weight (in*out f64, row-major), bias (out f64)
//! heads:   present u8; when 1:
//!          n_domains u32, rows u32 (embedding+1), labels u32,
//!          alpha_scales_intercept u8, w_vw (rows*labels f64),
//!          then per domain: alpha (rows*labels f64), delta (rows*labels f64)
//! dc:      present u8; when 1: rows u32, n_domains u32, phi (rows*n f64)
//! meta:    task_mode u8 (0 softmax-ce, 1 multilabel-bce),
//!          name_count u32, per name: len u32 + utf-8 bytes
//! ```
//!
//! [`save_network`]/[`load_network`] write just the magic, version and net
//! section for a bare feature extractor.

use crate::error::{Error, Result};
use crate::heads::{BiasHeadBank, DomainClassifier};
use crate::losses::TaskMode;
use crate::network::{Activation, DenseLayer, LayeredNet};
use crate::tensor::Tensor;
use crate::trainer::TrainedModel;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DBDG";
const VERSION: u32 = 1;

struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated reading {what} at byte {}: need {n} bytes, have {}",
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n * 8, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_header(out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
}

fn read_header(r: &mut Reader) -> Result<()> {
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    Ok(())
}

fn write_net(out: &mut Vec<u8>, net: &LayeredNet) {
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    out.extend_from_slice(&(net.input_dim() as u32).to_le_bytes());
    for layer in net.layers() {
        out.extend_from_slice(&(layer.weight.cols() as u32).to_le_bytes());
        out.push(match layer.activation {
            Activation::Identity => 0,
            Activation::Relu => 1,
        });
        write_f64s(out, layer.weight.data());
        write_f64s(out, layer.bias.data());
    }
}

fn read_net(r: &mut Reader) -> Result<LayeredNet> {
    let layer_count = r.u32("layer count")? as usize;
    let input_dim = r.u32("input dim")? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    let mut in_dim = input_dim;
    for l in 0..layer_count {
        let out_dim = r.u32("layer out dim")? as usize;
        let act = match r.u8("activation kind")? {
            0 => Activation::Identity,
            1 => Activation::Relu,
            k => return Err(Error::Format(format!("unknown activation kind {k} in layer {l}"))),
        };
        let w = r.f64s(in_dim * out_dim, "layer weights")?;
        let b = r.f64s(out_dim, "layer biases")?;
        layers.push(DenseLayer {
            weight: Tensor::new(vec![in_dim, out_dim], w)?,
            bias: Tensor::new(vec![1, out_dim], b)?,
            activation: act,
        });
        in_dim = out_dim;
    }
    LayeredNet::from_layers(input_dim, layers)
}

fn write_heads(out: &mut Vec<u8>, bank: &BiasHeadBank) {
    out.push(1);
    out.extend_from_slice(&(bank.n_domains() as u32).to_le_bytes());
    out.extend_from_slice(&(bank.w_vw.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(bank.w_vw.cols() as u32).to_le_bytes());
    out.push(bank.alpha_scales_intercept as u8);
    write_f64s(out, bank.w_vw.data());
    for i in 0..bank.n_domains() {
        write_f64s(out, bank.alphas[i].data());
        write_f64s(out, bank.deltas[i].data());
    }
}

fn read_heads(r: &mut Reader) -> Result<Option<BiasHeadBank>> {
    if r.u8("heads present flag")? == 0 {
        return Ok(None);
    }
    let n_domains = r.u32("head domain count")? as usize;
    let rows = r.u32("head rows")? as usize;
    let cols = r.u32("head labels")? as usize;
    let alpha_scales_intercept = r.u8("alpha intercept flag")? != 0;
    let w_vw = Tensor::new(vec![rows, cols], r.f64s(rows * cols, "w_vw")?)?;
    let mut alphas = Vec::with_capacity(n_domains);
    let mut deltas = Vec::with_capacity(n_domains);
    for _ in 0..n_domains {
        alphas.push(Tensor::new(vec![rows, cols], r.f64s(rows * cols, "alpha")?)?);
        deltas.push(Tensor::new(vec![rows, cols], r.f64s(rows * cols, "delta")?)?);
    }
    Ok(Some(BiasHeadBank { w_vw, alphas, deltas, alpha_scales_intercept }))
}

fn write_dc(out: &mut Vec<u8>, dc: &DomainClassifier) {
    out.push(1);
    out.extend_from_slice(&(dc.phi.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(dc.phi.cols() as u32).to_le_bytes());
    write_f64s(out, dc.phi.data());
}

fn read_dc(r: &mut Reader) -> Result<Option<DomainClassifier>> {
    if r.u8("dc present flag")? == 0 {
        return Ok(None);
    }
    let rows = r.u32("dc rows")? as usize;
    let cols = r.u32("dc domain count")? as usize;
    let phi = Tensor::new(vec![rows, cols], r.f64s(rows * cols, "phi")?)?;
    Ok(Some(DomainClassifier { phi }))
}

/// Save a full trained model.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    write_header(&mut out);
    write_net(&mut out, &model.net);
    write_heads(&mut out, &model.bank);
    write_dc(&mut out, &model.dc);
    out.push(match model.task_mode {
        TaskMode::SoftmaxCe => 0,
        TaskMode::MultilabelBce => 1,
    });
    out.extend_from_slice(&(model.domain_names.len() as u32).to_le_bytes());
    for name in &model.domain_names {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Load a model saved with [`save_model`].
pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data, pos: 0 };
    read_header(&mut r)?;
    let net = read_net(&mut r)?;
    let bank = read_heads(&mut r)?
        .ok_or_else(|| Error::Format("model checkpoint has no heads section".into()))?;
    let dc = read_dc(&mut r)?
        .ok_or_else(|| Error::Format("model checkpoint has no domain classifier section".into()))?;
    let task_mode = match r.u8("task mode")? {
        0 => TaskMode::SoftmaxCe,
        1 => TaskMode::MultilabelBce,
        k => return Err(Error::Format(format!("unknown task mode {k}"))),
    };
    let name_count = r.u32("domain name count")? as usize;
    let mut domain_names = Vec::with_capacity(name_count);
    for _ in 0..name_count {
        let len = r.u32("domain name length")? as usize;
        let bytes = r.take(len, "domain name")?;
        domain_names.push(String::from_utf8(bytes.to_vec()).map_err(|e| Error::Format(e.to_string()))?);
    }
    r.done()?;
    if bank.embedding_dim() != net.embedding_dim() {
        return Err(Error::Format(format!(
            "head embedding dim {} does not match network {}",
            bank.embedding_dim(),
            net.embedding_dim()
        )));
    }
    Ok(TrainedModel { net, bank, dc, task_mode, domain_names })
}

/// Save just the feature extractor.
pub fn save_network(net: &LayeredNet, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    write_header(&mut out);
    write_net(&mut out, net);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Load a bare feature extractor saved with [`save_network`].
pub fn load_network(path: &Path) -> Result<LayeredNet> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data, pos: 0 };
    read_header(&mut r)?;
    let net = read_net(&mut r)?;
    r.done()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> TrainedModel {
        TrainedModel {
            net: LayeredNet::init_mlp(3, &[4, 2], 5).unwrap(),
            bank: BiasHeadBank::init(2, 2, 2, 0.01, 6).unwrap(),
            dc: DomainClassifier::init(2, 2, 7).unwrap(),
            task_mode: TaskMode::SoftmaxCe,
            domain_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn model_roundtrip_bitwise() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        for (a, b) in model.net.layers().iter().zip(back.net.layers().iter()) {
            assert_eq!(a.weight.data(), b.weight.data());
            assert_eq!(a.bias.data(), b.bias.data());
            assert_eq!(a.activation, b.activation);
        }
        assert_eq!(model.bank.w_vw.data(), back.bank.w_vw.data());
        assert_eq!(model.bank.alphas[1].data(), back.bank.alphas[1].data());
        assert_eq!(model.bank.deltas[0].data(), back.bank.deltas[0].data());
        assert_eq!(model.dc.phi.data(), back.dc.phi.data());
        assert_eq!(back.domain_names, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(back.task_mode, TaskMode::SoftmaxCe);
    }

    #[test]
    fn network_roundtrip() {
        let net = LayeredNet::init_mlp(5, &[3], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_network(&net, &path).unwrap();
        let back = load_network(&path).unwrap();
        assert_eq!(net.layers()[0].weight.data(), back.layers()[0].weight.data());
    }

    #[test]
    fn truncation_and_bad_magic_rejected() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_model(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        let err = load_model(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }
}
