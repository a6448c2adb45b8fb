//! Models and IGIA maps stored as containers.

use std::collections::BTreeMap;
use std::path::Path;

use super::container::{load_container, save_container, Container, DType};
use crate::error::{ContainerError, Error, Result};
use crate::igia::{IgiaMap, IgiaMatrix};
use crate::model::{ModelConfig, ModelState};

const IGIA_SUFFIX: &str = ".igia";

fn parse_attr<T: std::str::FromStr>(c: &Container, key: &str) -> Result<T> {
    let raw = c.attr(key)?;
    raw.parse()
        .map_err(|_| ContainerError::Header(format!("attribute `{key}` has bad value `{raw}`")).into())
}

fn expect_kind(c: &Container, kind: &str) -> Result<()> {
    let found = c.attr("kind")?;
    if found != kind {
        return Err(Error::Input(format!("expected a {kind} container, found {found}")));
    }
    Ok(())
}

pub fn model_attrs(model: &ModelState) -> BTreeMap<String, String> {
    let c = &model.config;
    let ids: Vec<String> = model.layer_ids().iter().map(|i| i.to_string()).collect();
    BTreeMap::from([
        ("kind".into(), "model".into()),
        ("config.n_layers".into(), c.n_layers.to_string()),
        ("config.d_model".into(), c.d_model.to_string()),
        ("config.n_heads".into(), c.n_heads.to_string()),
        ("config.d_ff".into(), c.d_ff.to_string()),
        ("config.vocab_size".into(), c.vocab_size.to_string()),
        ("config.max_seq".into(), c.max_seq.to_string()),
        ("config.lora_rank".into(), c.lora_rank.to_string()),
        ("config.lora_alpha".into(), c.lora_alpha.to_string()),
        ("layer_ids".into(), ids.join(",")),
    ])
}

pub fn model_from_container(c: Container) -> Result<ModelState> {
    expect_kind(&c, "model")?;
    let config = ModelConfig {
        n_layers: parse_attr(&c, "config.n_layers")?,
        d_model: parse_attr(&c, "config.d_model")?,
        n_heads: parse_attr(&c, "config.n_heads")?,
        d_ff: parse_attr(&c, "config.d_ff")?,
        vocab_size: parse_attr(&c, "config.vocab_size")?,
        max_seq: parse_attr(&c, "config.max_seq")?,
        lora_rank: parse_attr(&c, "config.lora_rank")?,
        lora_alpha: parse_attr(&c, "config.lora_alpha")?,
    };
    let raw = c.attr("layer_ids")?;
    let ids = if raw.is_empty() {
        Vec::new()
    } else {
        raw.split(',')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::from(ContainerError::Header(format!("bad layer id `{s}`"))))
            })
            .collect::<Result<Vec<_>>>()?
    };
    ModelState::from_named_tensors(&config, &ids, c.tensors)
}

pub fn save_model(path: &Path, model: &ModelState, dtype: DType) -> Result<()> {
    save_container(path, &model.to_named_tensors(), &model_attrs(model), dtype)
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    model_from_container(load_container(path)?)
}

/// Tensor list and attributes for an IGIA map; every matrix must share one
/// `steps_seen`.
pub fn igia_parts(igia: &IgiaMap) -> Result<(Vec<(String, crate::numerics::Tensor)>, BTreeMap<String, String>)> {
    let steps: Vec<usize> = igia.values().map(|m| m.steps_seen).collect();
    let steps_seen = *steps.first().ok_or_else(|| Error::Input("empty IGIA map".into()))?;
    if steps.iter().any(|&s| s != steps_seen) {
        return Err(Error::Input("IGIA matrices disagree on steps_seen".into()));
    }
    let tensors = igia
        .values()
        .map(|m| (format!("{}{IGIA_SUFFIX}", m.name), m.f.clone()))
        .collect();
    let attrs = BTreeMap::from([
        ("kind".to_string(), "igia".to_string()),
        ("steps_seen".to_string(), steps_seen.to_string()),
    ]);
    Ok((tensors, attrs))
}

pub fn igia_from_container(c: Container) -> Result<IgiaMap> {
    expect_kind(&c, "igia")?;
    let steps_seen: usize = parse_attr(&c, "steps_seen")?;
    if steps_seen == 0 {
        return Err(ContainerError::Header("steps_seen must be >= 1".into()).into());
    }
    c.tensors
        .into_iter()
        .map(|(key, f)| {
            let name = key
                .strip_suffix(IGIA_SUFFIX)
                .ok_or_else(|| ContainerError::Header(format!("tensor `{key}` lacks the {IGIA_SUFFIX} suffix")))?
                .to_string();
            if f.data().iter().any(|&v| v < 0.0) {
                return Err(Error::Input(format!("IGIA matrix {name} has negative entries")));
            }
            Ok((
                name.clone(),
                IgiaMatrix {
                    name,
                    f,
                    steps_seen,
                },
            ))
        })
        .collect()
}

/// IGIA is always stored in 64-bit.
pub fn save_igia(path: &Path, igia: &IgiaMap) -> Result<()> {
    let (tensors, attrs) = igia_parts(igia)?;
    save_container(path, &tensors, &attrs, DType::F64)
}

pub fn load_igia(path: &Path) -> Result<IgiaMap> {
    igia_from_container(load_container(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::container::{decode_container, encode_container};
    use crate::numerics::Tensor;
    use std::collections::BTreeSet;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 9,
            max_seq: 6,
            lora_rank: 2,
            lora_alpha: 3.5,
        }
    }

    #[test]
    fn model_round_trip_after_drop() {
        let m = ModelState::build(&cfg(), 4).unwrap().drop_layers(&BTreeSet::from([1])).unwrap();
        let bytes = encode_container(&m.to_named_tensors(), &model_attrs(&m), DType::F64).unwrap();
        let back = model_from_container(decode_container(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.layer_ids(), vec![0, 2]);
    }

    #[test]
    fn igia_round_trip() {
        let igia: IgiaMap = ["layer.0.q", "layer.0.k"]
            .iter()
            .map(|n| {
                (
                    n.to_string(),
                    IgiaMatrix {
                        name: n.to_string(),
                        f: Tensor::from_rows(&[&[1.0, 2.0]]),
                        steps_seen: 3,
                    },
                )
            })
            .collect();
        let (t, a) = igia_parts(&igia).unwrap();
        let bytes = encode_container(&t, &a, DType::F64).unwrap();
        let c = decode_container(&bytes).unwrap();
        assert!(c.tensors.contains_key("layer.0.q.igia"));
        assert_eq!(igia_from_container(c).unwrap(), igia);
    }

    #[test]
    fn wrong_kind_rejected() {
        let m = ModelState::build(&cfg(), 0).unwrap();
        let bytes = encode_container(&m.to_named_tensors(), &model_attrs(&m), DType::F64).unwrap();
        assert!(igia_from_container(decode_container(&bytes).unwrap()).is_err());
    }
}
