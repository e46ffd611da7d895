//! Checkpoint directory: `manifest.json` (config, tensor names and shapes,
//! SHA-256 of the blob) plus `weights.bin`, the little-endian `f32`
//! concatenation of the tensors in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mlp::Mlp;
use super::DirectionModel;
use crate::encoder::{
    ConvPyramid, Encoders, FeatureConfig, OdfEncoderKind, TransformerEncoder, ODF_CHANNELS,
};
use crate::error::{Error, Result};
use crate::volume::Tissue;

pub const FORMAT: &str = "tractory-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub feature_config: FeatureConfig,
    pub head_sizes: Vec<usize>,
    /// Free-form record of how the weights were produced.
    pub provenance: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub weights_sha256: String,
}

enum Slot<'a> {
    F32(&'a mut [f32]),
    F64(&'a mut [f64]),
}

type Visit<'v> = dyn FnMut(String, Vec<usize>, Slot) + 'v;

fn visit_pyramid(tag: &str, p: &mut ConvPyramid, f: &mut Visit) {
    for (l, c) in p.layers.iter_mut().enumerate() {
        f(
            format!("encoder.{tag}.{l}.weight"),
            vec![27, c.in_ch, c.out_ch],
            Slot::F32(&mut c.weight),
        );
        f(
            format!("encoder.{tag}.{l}.bias"),
            vec![c.out_ch],
            Slot::F32(&mut c.bias),
        );
    }
}

fn visit_linear(name: &str, l: &mut crate::encoder::transformer::Linear, f: &mut Visit) {
    f(
        format!("{name}.weight"),
        vec![l.n_out, l.n_in],
        Slot::F32(&mut l.w),
    );
    f(format!("{name}.bias"), vec![l.n_out], Slot::F32(&mut l.b));
}

fn visit_transformer(t: &mut TransformerEncoder, f: &mut Visit) {
    visit_linear("transformer.embed", &mut t.embed, f);
    for (i, u) in t.units.iter_mut().enumerate() {
        for (n, l) in [
            ("q", &mut u.q),
            ("k", &mut u.k),
            ("v", &mut u.v),
            ("o", &mut u.o),
            ("mlp1", &mut u.mlp1),
            ("mlp2", &mut u.mlp2),
        ] {
            visit_linear(&format!("transformer.unit{i}.{n}"), l, f);
        }
    }
    for (i, l) in t.up.iter_mut().enumerate() {
        visit_linear(&format!("transformer.up{i}"), l, f);
    }
    for (i, l) in t.skip.iter_mut().enumerate() {
        visit_linear(&format!("transformer.skip{i}"), l, f);
    }
}

fn visit_head(m: &mut Mlp, f: &mut Visit) {
    let sizes = m.sizes.clone();
    let mut rest: &mut [f64] = &mut m.params;
    for (l, w) in sizes.windows(2).enumerate() {
        let (wt, tail) = rest.split_at_mut(w[0] * w[1]);
        let (b, tail) = tail.split_at_mut(w[1]);
        f(format!("head.{l}.weight"), vec![w[1], w[0]], Slot::F64(wt));
        f(format!("head.{l}.bias"), vec![w[1]], Slot::F64(b));
        rest = tail;
    }
}

fn visit(m: &mut DirectionModel, f: &mut Visit) {
    visit_pyramid("odf", &mut m.encoders.odf, f);
    if let Some(t) = m.encoders.transformer.as_mut() {
        visit_transformer(t, f);
    }
    visit_pyramid("seg", &mut m.encoders.seg, f);
    visit_pyramid("fixel", &mut m.encoders.fixel, f);
    let n = m.input_shift.len();
    f("input.shift".into(), vec![n], Slot::F32(&mut m.input_shift));
    f("input.scale".into(), vec![n], Slot::F32(&mut m.input_scale));
    visit_head(&mut m.head, f);
}

/// Zero-initialised model with the shapes implied by the config.
fn skeleton(cfg: &FeatureConfig, head_sizes: &[usize]) -> Result<DirectionModel> {
    cfg.validate()?;
    let transformer = match cfg.odf_encoder {
        OdfEncoderKind::Conv => None,
        OdfEncoderKind::Transformer => Some(TransformerEncoder::random(
            ODF_CHANNELS,
            cfg.patch,
            cfg.width,
            cfg.heads,
            cfg.blocks * cfg.units_per_block,
            cfg.odf_channels,
            0,
        )?),
    };
    let n = cfg.feature_len();
    if head_sizes.first() != Some(&n) {
        return Err(Error::Checkpoint(format!(
            "head input {:?} does not match feature length {n}",
            head_sizes.first()
        )));
    }
    Ok(DirectionModel {
        features: cfg.clone(),
        encoders: Encoders {
            odf: ConvPyramid::zeros(ODF_CHANNELS, cfg.odf_channels),
            transformer,
            seg: ConvPyramid::zeros(Tissue::COUNT, cfg.seg_channels),
            fixel: ConvPyramid::zeros(crate::encoder::FIXEL_CHANNELS, cfg.fixel_channels),
        },
        input_shift: vec![0.0; n],
        input_scale: vec![0.0; n],
        head: Mlp::zeros(head_sizes)?,
    })
}

/// Manifest and blob bytes for `model`.
pub fn encode_checkpoint(
    model: &DirectionModel,
    provenance: serde_json::Value,
) -> Result<(Vec<u8>, Vec<u8>)> {
    model.validate()?;
    let mut m = model.clone();
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    visit(&mut m, &mut |name, shape, slot| {
        match slot {
            Slot::F32(s) => s
                .iter()
                .for_each(|v| blob.extend_from_slice(&v.to_le_bytes())),
            Slot::F64(s) => s
                .iter()
                .for_each(|v| blob.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
        tensors.push(TensorEntry { name, shape });
    });
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        feature_config: model.features.clone(),
        head_sizes: model.head.sizes.clone(),
        provenance,
        tensors,
        weights_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    Ok((json, blob))
}

pub fn decode_checkpoint(manifest: &[u8], blob: &[u8]) -> Result<(DirectionModel, Manifest)> {
    let man: Manifest = serde_json::from_slice(manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if man.format != FORMAT || man.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            man.format, man.version
        )));
    }
    let digest = hex::encode(Sha256::digest(blob));
    if digest != man.weights_sha256 {
        return Err(Error::Checkpoint(format!(
            "weights hash {digest} does not match manifest {}",
            man.weights_sha256
        )));
    }
    let mut model = skeleton(&man.feature_config, &man.head_sizes)?;
    let mut expected = Vec::new();
    visit(&mut model, &mut |name, shape, _| {
        expected.push(TensorEntry { name, shape })
    });
    if expected != man.tensors {
        return Err(Error::Checkpoint(
            "manifest tensor list does not match the configured model".into(),
        ));
    }
    let total: usize = expected
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if blob.len() != 4 * total {
        return Err(Error::Checkpoint(format!(
            "weights blob holds {} bytes, manifest implies {}",
            blob.len(),
            4 * total
        )));
    }
    let mut at = 0;
    let mut next = || {
        let v = f32::from_le_bytes(blob[at..at + 4].try_into().expect("4-byte slice"));
        at += 4;
        v
    };
    let mut bad = false;
    visit(&mut model, &mut |_, _, slot| match slot {
        Slot::F32(s) => s.iter_mut().for_each(|v| *v = next()),
        Slot::F64(s) => s.iter_mut().for_each(|v| {
            let x = next();
            bad |= !x.is_finite();
            *v = x as f64
        }),
    });
    if bad {
        return Err(Error::Checkpoint("non-finite head weight".into()));
    }
    model.validate()?;
    Ok((model, man))
}

pub fn save_checkpoint(
    model: &DirectionModel,
    dir: &Path,
    provenance: serde_json::Value,
) -> Result<()> {
    let (json, blob) = encode_checkpoint(model, provenance)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mp = dir.join(MANIFEST);
    fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
    let wp = dir.join(WEIGHTS);
    fs::write(&wp, blob).map_err(|e| Error::io(&wp, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(DirectionModel, Manifest)> {
    let mp = dir.join(MANIFEST);
    let manifest = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    let wp = dir.join(WEIGHTS);
    let blob = fs::read(&wp).map_err(|e| Error::io(&wp, e))?;
    decode_checkpoint(&manifest, &blob)
}
