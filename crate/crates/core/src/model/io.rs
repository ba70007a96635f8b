use std::path::Path;

use super::{LayerWeights, ModelConfig, ModelWeights};
use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};

pub(crate) fn layer_tensor_name(layer: usize, field: &str) -> String {
    format!("layers.{layer}.{field}")
}

/// Writes the shared (non-attention) tensors of one layer.
pub(crate) fn push_mlp_and_norms(
    out: &mut ContainerWriter,
    l: usize,
    lw_attn_norm: &[f64],
    lw_mlp_norm: &[f64],
    gate: &crate::densemat::Matrix<f64>,
    up: &crate::densemat::Matrix<f64>,
    down: &crate::densemat::Matrix<f64>,
) {
    out.push_vector(layer_tensor_name(l, "attn_norm"), lw_attn_norm);
    out.push_vector(layer_tensor_name(l, "mlp_norm"), lw_mlp_norm);
    out.push(layer_tensor_name(l, "w_gate"), gate);
    out.push(layer_tensor_name(l, "w_up"), up);
    out.push(layer_tensor_name(l, "w_down"), down);
}

pub(crate) fn push_layer(out: &mut ContainerWriter, l: usize, lw: &LayerWeights<f64>) {
    out.push(layer_tensor_name(l, "w_q"), &lw.w_q);
    out.push(layer_tensor_name(l, "w_k"), &lw.w_k);
    out.push(layer_tensor_name(l, "w_v"), &lw.w_v);
    out.push(layer_tensor_name(l, "w_o"), &lw.w_o);
    push_mlp_and_norms(out, l, &lw.attn_norm, &lw.mlp_norm, &lw.w_gate, &lw.w_up, &lw.w_down);
}

pub(crate) fn read_layer(c: &Container, cfg: &ModelConfig, l: usize) -> Result<LayerWeights<f64>> {
    let d = cfg.model_dim;
    let n = |f: &str| layer_tensor_name(l, f);
    Ok(LayerWeights {
        w_q: c.tensor_shaped(&n("w_q"), d, cfg.q_dim())?,
        w_k: c.tensor_shaped(&n("w_k"), d, cfg.kv_dim())?,
        w_v: c.tensor_shaped(&n("w_v"), d, cfg.kv_dim())?,
        w_o: c.tensor_shaped(&n("w_o"), cfg.q_dim(), d)?,
        attn_norm: c.vector(&n("attn_norm"), d)?,
        mlp_norm: c.vector(&n("mlp_norm"), d)?,
        w_gate: c.tensor_shaped(&n("w_gate"), d, cfg.mlp_hidden)?,
        w_up: c.tensor_shaped(&n("w_up"), d, cfg.mlp_hidden)?,
        w_down: c.tensor_shaped(&n("w_down"), cfg.mlp_hidden, d)?,
    })
}

/// Saves a model as a plain (uncompressed) container directory.
pub fn save_model(w: &ModelWeights<f64>, dir: &Path) -> Result<()> {
    w.validate()?;
    let mut out = ContainerWriter::new();
    out.push("embedding", &w.embedding);
    for (l, lw) in w.layers.iter().enumerate() {
        push_layer(&mut out, l, lw);
    }
    out.push_vector("final_norm", &w.final_norm);
    out.push("lm_head", &w.lm_head);
    out.write(dir, &w.config, None)
}

/// Loads a plain container. Compressed containers are rejected.
pub fn load_model(dir: &Path) -> Result<ModelWeights<f64>> {
    let c = Container::open(dir)?;
    if c.header.compressed {
        return Err(Error::Format(
            "container holds a compressed model; load it as compressed".into(),
        ));
    }
    let cfg = c.header.config.clone();
    let layers = (0..cfg.num_layers)
        .map(|l| read_layer(&c, &cfg, l))
        .collect::<Result<Vec<_>>>()?;
    let w = ModelWeights {
        embedding: c.tensor_shaped("embedding", cfg.vocab_size, cfg.model_dim)?,
        final_norm: c.vector("final_norm", cfg.model_dim)?,
        lm_head: c.tensor_shaped("lm_head", cfg.model_dim, cfg.vocab_size)?,
        layers,
        config: cfg,
    };
    w.validate()?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{CONFIG_FILE, WEIGHTS_FILE};
    use crate::model::{generate_synthetic, preset, SpectrumSpec};

    fn toy() -> ModelWeights<f64> {
        let cfg = ModelConfig {
            num_layers: 2,
            ..preset("toy-small").unwrap()
        };
        generate_synthetic(&cfg, &SpectrumSpec::uniform(1.0, 0.8), 2).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let w = toy();
        save_model(&w, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&toy(), dir.path()).unwrap();
        let p = dir.path().join(WEIGHTS_FILE);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::BlobLength { .. })));
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&toy(), dir.path()).unwrap();
        let p = dir.path().join(WEIGHTS_FILE);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[100] ^= 0x01;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn missing_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&toy(), dir.path()).unwrap();
        let p = dir.path().join(CONFIG_FILE);
        let text = std::fs::read_to_string(&p).unwrap();
        let renamed = text.replace("\"layers.1.w_up\"", "\"layers.1.w_upx\"");
        std::fs::write(&p, renamed).unwrap();
        match load_model(dir.path()) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "layers.1.w_up"),
            other => panic!("expected missing tensor, got {other:?}"),
        }
    }

    #[test]
    fn header_has_flat_config_fields() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&toy(), dir.path()).unwrap();
        let v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["num_kv_heads"], 2);
        assert_eq!(v["compressed"], false);
        assert!(v["tensors"].as_array().unwrap().iter().all(|t| t["offset"].as_u64().unwrap() % 8 == 0));
    }
}
