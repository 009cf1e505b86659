//! Checkpoint directories: `manifest.json` describes every parameter
//! (name, shape, byte offset and length, plus a config echo and format
//! version); `params.bin` holds the values as concatenated row-major
//! little-endian 64-bit floats. Offsets are contiguous and
//! non-overlapping, and a load/save round trip is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use trellisnet::equivalence::{EmbeddedTrellis, RnnCell};
use trellisnet::rnn::{LstmLayer, LstmParams, Nonlinearity, VanillaRnnParams};
use trellisnet::tensor::Tensor;
use trellisnet::training::{DecoderKind, Heads, Model};
use trellisnet::trellis::{KernelParam, TrellisConfig, TrellisParams};

use crate::config::RunConfig;
use crate::CmdError;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: u64,
    /// Byte length (`8 ×` element count).
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// "trellis" or "rnn".
    pub kind: String,
    /// Arbitrary JSON echo of the configuration that produced the params.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

// ── Raw save/load ───────────────────────────────────────────────────────────

pub fn save_raw(
    dir: &Path,
    kind: &str,
    config: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<(), CmdError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for v in t.data().iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        params: entries,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest_json.as_bytes())?;
    std::fs::write(dir.join(PARAMS_FILE), &blob)?;
    Ok(())
}

pub fn load_raw(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor)>), CmdError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        CmdError::usage(format!("cannot read checkpoint manifest {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CmdError::usage(format!("invalid manifest {}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CmdError::usage(format!(
            "unsupported checkpoint format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let blob = std::fs::read(dir.join(PARAMS_FILE))?;
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        if entry.offset != expected_offset {
            return Err(CmdError::usage(format!(
                "parameter {} at offset {} — expected contiguous offset {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.len != (numel * 8) as u64 {
            return Err(CmdError::usage(format!(
                "parameter {}: byte length {} does not match shape {:?}",
                entry.name, entry.len, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > blob.len() {
            return Err(CmdError::usage(format!("parameter {} overruns params.bin", entry.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data).unwrap()));
        expected_offset = end as u64;
    }
    if expected_offset != blob.len() as u64 {
        return Err(CmdError::usage(format!(
            "params.bin has {} trailing bytes not covered by the manifest",
            blob.len() as u64 - expected_offset
        )));
    }
    Ok((manifest, tensors))
}

fn take(tensors: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor, CmdError> {
    match tensors.iter().position(|(n, _)| n == name) {
        Some(i) => Ok(tensors.remove(i).1),
        None => Err(CmdError::usage(format!("checkpoint is missing parameter {name:?}"))),
    }
}

fn take_opt(tensors: &mut Vec<(String, Tensor)>, name: &str) -> Option<Tensor> {
    tensors.iter().position(|(n, _)| n == name).map(|i| tensors.remove(i).1)
}

fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<(), CmdError> {
    if t.shape() != shape {
        return Err(CmdError::usage(format!(
            "parameter {name} has shape {:?}, config requires {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

// ── Trained-model checkpoints ───────────────────────────────────────────────

pub fn save_model(dir: &Path, run: &RunConfig, model: &Model) -> Result<(), CmdError> {
    let heads = &model.heads;
    let heads_meta = json!({
        "vocab": heads.embedding.as_ref().map(|e| e.cols()),
        "classes": heads.decoder_b.numel(),
        "tied": matches!(heads.decoder, DecoderKind::Tied),
    });
    let config = json!({ "run": run, "heads": heads_meta });
    let tensors: Vec<(String, &Tensor)> =
        model.fields().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    save_raw(dir, "trellis", config, &tensors)
}

pub fn load_model(dir: &Path) -> Result<(RunConfig, Model), CmdError> {
    let (manifest, mut tensors) = load_raw(dir)?;
    if manifest.kind != "trellis" {
        return Err(CmdError::usage(format!(
            "expected a trellis model checkpoint, found kind {:?}",
            manifest.kind
        )));
    }
    let run: RunConfig = serde_json::from_value(
        manifest
            .config
            .get("run")
            .cloned()
            .ok_or_else(|| CmdError::usage("manifest config lacks a \"run\" section"))?,
    )?;
    run.validate()?;
    let config = run.trellis_config()?;
    let (r, q, p) = (config.r(), config.q, config.p);

    let wz = match take_opt(&mut tensors, "wz") {
        Some(k) => {
            expect_shape("wz", &k, &[r, q, 2])?;
            KernelParam::Direct(k)
        }
        None => {
            let v = take(&mut tensors, "wz_v")?;
            let g = take(&mut tensors, "wz_g")?;
            expect_shape("wz_v", &v, &[r, q, 2])?;
            expect_shape("wz_g", &g, &[r])?;
            KernelParam::WeightNormed { v, g }
        }
    };
    let wx = take(&mut tensors, "wx")?;
    expect_shape("wx", &wx, &[r, p, 2])?;
    let bias = take(&mut tensors, "bias")?;
    expect_shape("bias", &bias, &[r])?;
    let trellis = TrellisParams { wz, wx, bias };

    let heads_meta = manifest
        .config
        .get("heads")
        .cloned()
        .ok_or_else(|| CmdError::usage("manifest config lacks a \"heads\" section"))?;
    let classes = heads_meta["classes"]
        .as_u64()
        .ok_or_else(|| CmdError::usage("heads.classes missing from manifest"))? as usize;
    let tied = heads_meta["tied"].as_bool().unwrap_or(false);
    let embedding = match take_opt(&mut tensors, "embedding") {
        Some(e) => {
            let vocab = heads_meta["vocab"]
                .as_u64()
                .ok_or_else(|| CmdError::usage("heads.vocab missing from manifest"))?
                as usize;
            expect_shape("embedding", &e, &[p, vocab])?;
            Some(e)
        }
        None => None,
    };
    let decoder = if tied {
        DecoderKind::Tied
    } else {
        let w = take(&mut tensors, "decoder_w")?;
        expect_shape("decoder_w", &w, &[classes, q])?;
        DecoderKind::Weights(w)
    };
    let decoder_b = take(&mut tensors, "decoder_b")?;
    expect_shape("decoder_b", &decoder_b, &[classes])?;
    if let Some((name, _)) = tensors.first() {
        return Err(CmdError::usage(format!("checkpoint has unexpected parameter {name:?}")));
    }
    let heads = Heads { embedding, decoder, decoder_b };
    Ok((run, Model { trellis, config, heads }))
}

// ── RNN checkpoints ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum RnnCheckpoint {
    Vanilla(VanillaRnnParams),
    Lstm(LstmParams),
}

impl RnnCheckpoint {
    pub fn cell(&self) -> RnnCell {
        match self {
            RnnCheckpoint::Vanilla(_) => RnnCell::Vanilla,
            RnnCheckpoint::Lstm(_) => RnnCell::Lstm,
        }
    }
}

const LSTM_GATE_NAMES: [(&str, &str, &str); 4] =
    [("w_f", "u_f", "b_f"), ("w_i", "u_i", "b_i"), ("w_g", "u_g", "b_g"), ("w_o", "u_o", "b_o")];

pub fn save_rnn(dir: &Path, rnn: &RnnCheckpoint) -> Result<(), CmdError> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    let config = match rnn {
        RnnCheckpoint::Vanilla(p) => {
            for (i, (wx, wh)) in p.w_hx.iter().zip(p.w_hh.iter()).enumerate() {
                tensors.push((format!("l{i}.w_hx"), wx));
                tensors.push((format!("l{i}.w_hh"), wh));
            }
            json!({
                "cell": "vanilla",
                "layers": p.layers(),
                "hidden": p.hidden(),
                "input_dim": p.input_dim(),
                "nonlinearity": match p.g { Nonlinearity::Tanh => "tanh", Nonlinearity::Sigmoid => "sigmoid" },
            })
        }
        RnnCheckpoint::Lstm(p) => {
            for (i, layer) in p.layers.iter().enumerate() {
                let gates = [
                    (&layer.w_f, &layer.u_f, &layer.b_f),
                    (&layer.w_i, &layer.u_i, &layer.b_i),
                    (&layer.w_g, &layer.u_g, &layer.b_g),
                    (&layer.w_o, &layer.u_o, &layer.b_o),
                ];
                for ((w, u, b), (wn, un, bn)) in gates.into_iter().zip(LSTM_GATE_NAMES) {
                    tensors.push((format!("l{i}.{wn}"), w));
                    tensors.push((format!("l{i}.{un}"), u));
                    tensors.push((format!("l{i}.{bn}"), b));
                }
            }
            json!({
                "cell": "lstm",
                "layers": p.layers(),
                "hidden": p.hidden(),
                "input_dim": p.input_dim(),
            })
        }
    };
    save_raw(dir, "rnn", config, &tensors)
}

pub fn load_rnn(dir: &Path) -> Result<RnnCheckpoint, CmdError> {
    let (manifest, mut tensors) = load_raw(dir)?;
    if manifest.kind != "rnn" {
        return Err(CmdError::usage(format!("expected an rnn checkpoint, found kind {:?}", manifest.kind)));
    }
    let field_usize = |name: &str| -> Result<usize, CmdError> {
        manifest.config[name]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| CmdError::usage(format!("rnn manifest lacks {name:?}")))
    };
    let layers = field_usize("layers")?;
    let hidden = field_usize("hidden")?;
    let input_dim = field_usize("input_dim")?;
    if layers == 0 || hidden == 0 || input_dim == 0 {
        return Err(CmdError::usage("rnn dimensions must all be >= 1"));
    }
    match manifest.config["cell"].as_str() {
        Some("vanilla") => {
            let g = match manifest.config["nonlinearity"].as_str() {
                Some("tanh") | None => Nonlinearity::Tanh,
                Some("sigmoid") => Nonlinearity::Sigmoid,
                Some(other) => {
                    return Err(CmdError::usage(format!("unknown nonlinearity {other:?}")))
                }
            };
            let mut w_hx = Vec::with_capacity(layers);
            let mut w_hh = Vec::with_capacity(layers);
            for i in 0..layers {
                let d_in = if i == 0 { input_dim } else { hidden };
                let wx = take(&mut tensors, &format!("l{i}.w_hx"))?;
                expect_shape(&format!("l{i}.w_hx"), &wx, &[hidden, d_in])?;
                let wh = take(&mut tensors, &format!("l{i}.w_hh"))?;
                expect_shape(&format!("l{i}.w_hh"), &wh, &[hidden, hidden])?;
                w_hx.push(wx);
                w_hh.push(wh);
            }
            Ok(RnnCheckpoint::Vanilla(VanillaRnnParams { w_hx, w_hh, g }))
        }
        Some("lstm") => {
            let mut layers_vec = Vec::with_capacity(layers);
            for i in 0..layers {
                let d_in = if i == 0 { input_dim } else { hidden };
                let mut gate = |wn: &str, un: &str, bn: &str| -> Result<(Tensor, Tensor, Tensor), CmdError> {
                    let w = take(&mut tensors, &format!("l{i}.{wn}"))?;
                    expect_shape(&format!("l{i}.{wn}"), &w, &[hidden, d_in])?;
                    let u = take(&mut tensors, &format!("l{i}.{un}"))?;
                    expect_shape(&format!("l{i}.{un}"), &u, &[hidden, hidden])?;
                    let b = take(&mut tensors, &format!("l{i}.{bn}"))?;
                    expect_shape(&format!("l{i}.{bn}"), &b, &[hidden])?;
                    Ok((w, u, b))
                };
                let (w_f, u_f, b_f) = gate("w_f", "u_f", "b_f")?;
                let (w_i, u_i, b_i) = gate("w_i", "u_i", "b_i")?;
                let (w_g, u_g, b_g) = gate("w_g", "u_g", "b_g")?;
                let (w_o, u_o, b_o) = gate("w_o", "u_o", "b_o")?;
                layers_vec.push(LstmLayer {
                    w_f, u_f, b_f, w_i, u_i, b_i, w_g, u_g, b_g, w_o, u_o, b_o,
                });
            }
            Ok(RnnCheckpoint::Lstm(LstmParams { layers: layers_vec }))
        }
        other => Err(CmdError::usage(format!("unknown rnn cell {other:?}"))),
    }
}

// ── Embedded-trellis checkpoints ────────────────────────────────────────────

fn activation_name(config: &TrellisConfig) -> &'static str {
    use trellisnet::trellis::Activation;
    match config.activation {
        Activation::LstmGate => "lstm",
        Activation::Elementwise(Nonlinearity::Tanh) => "tanh",
        Activation::Elementwise(Nonlinearity::Sigmoid) => "sigmoid",
    }
}

/// Writes the trellis network produced by the RNN embedding, preserving the
/// sparse kernels verbatim (embedded zeros are stored explicitly).
pub fn save_embedded(dir: &Path, emb: &EmbeddedTrellis) -> Result<(), CmdError> {
    let config = json!({
        "model": {
            "p": emb.config.p,
            "q": emb.config.q,
            "depth": emb.config.depth,
            "dilations": emb.config.dilations,
            "activation": activation_name(&emb.config),
            "aux_every": emb.config.aux_every,
            "inject_every": emb.config.inject_every,
        },
        "embedding": {
            "cell": match emb.cell { RnnCell::Vanilla => "vanilla", RnnCell::Lstm => "lstm" },
            "layers": emb.layers,
            "hidden": emb.hidden,
            "input_dim": emb.input_dim,
            "truncation": emb.truncation,
        },
    });
    let tensors: Vec<(String, &Tensor)> =
        emb.params.fields().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    save_raw(dir, "trellis", config, &tensors)
}

pub fn load_embedded(dir: &Path) -> Result<EmbeddedTrellis, CmdError> {
    let (manifest, mut tensors) = load_raw(dir)?;
    if manifest.kind != "trellis" {
        return Err(CmdError::usage(format!("expected a trellis checkpoint, found kind {:?}", manifest.kind)));
    }
    let m = &manifest.config["model"];
    let e = &manifest.config["embedding"];
    if e.is_null() {
        return Err(CmdError::usage("checkpoint lacks an \"embedding\" section (not produced by convert)"));
    }
    let u = |v: &serde_json::Value, name: &str| -> Result<usize, CmdError> {
        v.as_u64().map(|x| x as usize).ok_or_else(|| CmdError::usage(format!("manifest lacks {name}")))
    };
    let p = u(&m["p"], "model.p")?;
    let q = u(&m["q"], "model.q")?;
    let depth = u(&m["depth"], "model.depth")?;
    let dilations: Vec<usize> = serde_json::from_value(m["dilations"].clone())?;
    let activation = match m["activation"].as_str() {
        Some("lstm") => trellisnet::trellis::Activation::LstmGate,
        Some("tanh") => trellisnet::trellis::Activation::Elementwise(Nonlinearity::Tanh),
        Some("sigmoid") => trellisnet::trellis::Activation::Elementwise(Nonlinearity::Sigmoid),
        other => return Err(CmdError::usage(format!("unknown activation {other:?}"))),
    };
    let config = TrellisConfig {
        p,
        q,
        depth,
        dilations,
        activation,
        aux_every: u(&m["aux_every"], "model.aux_every")?,
        inject_every: u(&m["inject_every"], "model.inject_every")?,
    };
    config.validate().map_err(|err| CmdError::usage(err.to_string()))?;
    let r = config.r();
    let wz = take(&mut tensors, "wz")?;
    expect_shape("wz", &wz, &[r, q, 2])?;
    let wx = take(&mut tensors, "wx")?;
    expect_shape("wx", &wx, &[r, p, 2])?;
    let bias = take(&mut tensors, "bias")?;
    expect_shape("bias", &bias, &[r])?;
    let cell = match e["cell"].as_str() {
        Some("vanilla") => RnnCell::Vanilla,
        Some("lstm") => RnnCell::Lstm,
        other => return Err(CmdError::usage(format!("unknown embedded cell {other:?}"))),
    };
    let layers = u(&e["layers"], "embedding.layers")?;
    let hidden = u(&e["hidden"], "embedding.hidden")?;
    let input_dim = u(&e["input_dim"], "embedding.input_dim")?;
    let truncation = u(&e["truncation"], "embedding.truncation")?;
    if q != layers * hidden {
        return Err(CmdError::usage(format!(
            "width inconsistency: q = {q} but layers × hidden = {}",
            layers * hidden
        )));
    }
    if depth != truncation + layers - 1 {
        return Err(CmdError::usage(format!(
            "depth inconsistency: depth = {depth} but truncation + layers − 1 = {}",
            truncation + layers - 1
        )));
    }
    Ok(EmbeddedTrellis {
        params: TrellisParams { wz: KernelParam::Direct(wz), wx, bias },
        config,
        cell,
        layers,
        hidden,
        input_dim,
        truncation,
    })
}
