//! Model checkpoints: a directory of TSR1 tensors plus a plain-text
//! manifest listing layer order, shapes, and adapter attachment.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::SparseLoraModule;
use crate::models::{
    Activation, AttentionBlock, FrozenLinear, Layer, LossKind, Slot, TargetId, TinyModel,
};
use crate::tensor::tsr1::{self, Dtype};

const MANIFEST: &str = "manifest.txt";

fn slot_prefix(layer: usize, slot: Slot) -> String {
    format!("layer{layer:02}_{}", slot.as_str())
}

pub fn save_model(model: &TinyModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(&dir.display().to_string(), e))?;
    let mut manifest = String::from("taso-model v1\n");
    let _ = writeln!(manifest, "loss {}", model.loss_kind().as_str());
    let targets: Vec<String> = model.adapter_targets().iter().map(|t| t.to_string()).collect();
    let _ = writeln!(manifest, "adapter_targets {}", targets.join(","));

    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Linear { lin, activation } => {
                let _ = writeln!(
                    manifest,
                    "layer {i} linear rows={} cols={} activation={} bias={} adapter={}",
                    lin.out_dim(),
                    lin.in_dim(),
                    activation.as_str(),
                    lin.bias().is_some(),
                    lin.adapter().is_some(),
                );
                save_linear(lin, dir, &slot_prefix(i, Slot::Main))?;
            }
            Layer::Attention(att) => {
                let _ = writeln!(
                    manifest,
                    "layer {i} attention dim={} q_adapter={} k_adapter={} v_adapter={}",
                    att.dim(),
                    att.wq.adapter().is_some(),
                    att.wk.adapter().is_some(),
                    att.wv.adapter().is_some(),
                );
                save_linear(&att.wq, dir, &slot_prefix(i, Slot::Query))?;
                save_linear(&att.wk, dir, &slot_prefix(i, Slot::Key))?;
                save_linear(&att.wv, dir, &slot_prefix(i, Slot::Value))?;
            }
        }
    }
    std::fs::write(dir.join(MANIFEST), manifest)
        .map_err(|e| Error::io(&dir.join(MANIFEST).display().to_string(), e))
}

fn save_linear(lin: &FrozenLinear, dir: &Path, prefix: &str) -> Result<()> {
    tsr1::write_matrix(&dir.join(format!("{prefix}_w0.tsr")), lin.w0(), Dtype::F64)?;
    if let Some(b) = lin.bias() {
        tsr1::write_matrix(&dir.join(format!("{prefix}_bias.tsr")), b, Dtype::F64)?;
    }
    if let Some(adapter) = lin.adapter() {
        adapter.save(dir, &format!("{prefix}_adapter"))?;
    }
    Ok(())
}

fn load_linear(dir: &Path, prefix: &str, has_bias: bool, has_adapter: bool) -> Result<FrozenLinear> {
    let w0 = tsr1::read_matrix(&dir.join(format!("{prefix}_w0.tsr")))?;
    let bias = if has_bias {
        Some(tsr1::read_matrix(&dir.join(format!("{prefix}_bias.tsr")))?)
    } else {
        None
    };
    let mut lin = FrozenLinear::new(w0, bias)?;
    if has_adapter {
        lin.attach_adapter(SparseLoraModule::load(dir, &format!("{prefix}_adapter"))?)?;
    }
    Ok(lin)
}

pub fn load_model(dir: &Path) -> Result<TinyModel> {
    let path = dir.join(MANIFEST);
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(&path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 0,
        msg: "empty manifest".into(),
    })?;
    if header.trim() != "taso-model v1" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected manifest header `{header}`"),
        });
    }

    let mut loss = None;
    let mut adapter_targets: Option<Vec<TargetId>> = None;
    let mut layers = Vec::new();

    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next().unwrap() {
            "loss" => {
                let val = tokens.next().ok_or_else(|| parse_err(lineno, "missing loss kind"))?;
                loss = Some(LossKind::parse(val).map_err(|e| parse_err(lineno, &e.to_string()))?);
            }
            "adapter_targets" => {
                let body = tokens.next().unwrap_or("");
                let mut out = Vec::new();
                if !body.is_empty() {
                    for part in body.split(',') {
                        out.push(parse_target(part, lineno)?);
                    }
                }
                adapter_targets = Some(out);
            }
            "layer" => {
                let index: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err(lineno, "bad layer index"))?;
                if index != layers.len() {
                    return Err(parse_err(lineno, "layers out of order"));
                }
                let kind = tokens.next().ok_or_else(|| parse_err(lineno, "missing layer kind"))?;
                let kv: std::collections::BTreeMap<&str, &str> = tokens
                    .filter_map(|t| t.split_once('='))
                    .collect();
                match kind {
                    "linear" => {
                        let activation = Activation::parse(kv.get("activation").copied().unwrap_or("none"))
                            .map_err(|e| parse_err(lineno, &e.to_string()))?;
                        let has_bias = kv.get("bias").copied() == Some("true");
                        let has_adapter = kv.get("adapter").copied() == Some("true");
                        let lin = load_linear(dir, &slot_prefix(index, Slot::Main), has_bias, has_adapter)?;
                        layers.push(Layer::Linear { lin, activation });
                    }
                    "attention" => {
                        let read = |slot: Slot, key: &str| -> Result<FrozenLinear> {
                            let has_adapter = kv.get(key).copied() == Some("true");
                            load_linear(dir, &slot_prefix(index, slot), false, has_adapter)
                        };
                        layers.push(Layer::Attention(AttentionBlock {
                            wq: read(Slot::Query, "q_adapter")?,
                            wk: read(Slot::Key, "k_adapter")?,
                            wv: read(Slot::Value, "v_adapter")?,
                        }));
                    }
                    other => return Err(parse_err(lineno, &format!("unknown layer kind `{other}`"))),
                }
            }
            other => return Err(parse_err(lineno, &format!("unknown manifest key `{other}`"))),
        }
    }

    let loss = loss.ok_or_else(|| parse_err(0, "manifest missing loss line"))?;
    let mut model = TinyModel::new(layers, loss)?;
    if let Some(targets) = adapter_targets {
        model.set_adapter_targets(targets)?;
    }
    Ok(model)
}

fn parse_target(s: &str, lineno: usize) -> Result<TargetId> {
    let (layer, slot) = s
        .split_once(':')
        .ok_or_else(|| parse_err(lineno, &format!("bad target `{s}`")))?;
    let layer = layer
        .parse()
        .map_err(|_| parse_err(lineno, &format!("bad target layer `{layer}`")))?;
    let slot = match slot {
        "main" => Slot::Main,
        "query" => Slot::Query,
        "key" => Slot::Key,
        "value" => Slot::Value,
        other => return Err(parse_err(lineno, &format!("bad target slot `{other}`"))),
    };
    Ok(TargetId { layer, slot })
}

fn parse_err(line: usize, msg: &str) -> Error {
    Error::Parse {
        line,
        msg: msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::CoreRegion;
    use crate::lora::{init_adapter, Stage};
    use crate::models::build_mlp;

    #[test]
    fn checkpoint_round_trip_with_adapter() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_mlp(
            &[6, 5, 3],
            Activation::Gelu,
            LossKind::CrossEntropy,
            123,
        )
        .unwrap();
        let region = CoreRegion::new(vec![1, 4], vec![0], 0.2).unwrap();
        let adapter = init_adapter(5, 6, 1, Stage::Row, &region, 9).unwrap();
        model.attach_adapter(TargetId::main(0), adapter).unwrap();
        model.set_adapter_targets(vec![TargetId::main(0)]).unwrap();

        save_model(&model, dir.path()).unwrap();
        let loaded = load_model(dir.path()).unwrap();

        assert_eq!(loaded.loss_kind(), LossKind::CrossEntropy);
        assert_eq!(loaded.adapter_targets(), model.adapter_targets());
        for id in model.all_matrix_ids() {
            assert_eq!(loaded.weight(id).unwrap().data(), model.weight(id).unwrap().data());
        }
        assert!(loaded.has_adapter(TargetId::main(0)));
        let x = crate::models::gaussian_matrix(6, 3, 55);
        assert_eq!(
            loaded.forward(&x).unwrap().data(),
            model.forward(&x).unwrap().data()
        );
    }

    #[test]
    fn attention_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = crate::models::build_attention_probe(4, 2, 31).unwrap();
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        let x = crate::models::gaussian_matrix(4, 3, 32);
        assert_eq!(
            loaded.forward(&x).unwrap().data(),
            model.forward(&x).unwrap().data()
        );
    }

    #[test]
    fn corrupt_manifest_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST), "taso-model v1\nbogus line\n").unwrap();
        match load_model(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
