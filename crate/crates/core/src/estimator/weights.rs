//! Binary weight files.
//!
//! Layout: magic `RNWT`, format version, the 16-character architecture
//! fingerprint, the architecture as JSON, then a tensor table holding every
//! parameter plus the batch-norm running statistics. All integers are
//! little-endian and tensor data is stored as little-endian f64.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bytes::{push_u32, Reader};
use crate::error::{Error, Result};
use crate::numerics::{BatchNormState, Real, Tensor};

use super::{net, Estimator, EstimatorConfig};

pub const WEIGHTS_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RNWT";
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

impl Estimator {
    /// Serialize weights and batch-norm statistics to `path`.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        push_u32(&mut buf, WEIGHTS_VERSION);
        let fingerprint = self.fingerprint();
        debug_assert_eq!(fingerprint.len(), 16);
        buf.extend_from_slice(fingerprint.as_bytes());
        let config_json =
            serde_json::to_vec(self.config()).expect("config serializes");
        push_u32(&mut buf, config_json.len() as u32);
        buf.extend_from_slice(&config_json);

        let entries = self.tensor_entries();
        push_u32(&mut buf, entries.len() as u32);
        for (name, tensor) in entries {
            push_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            push_u32(&mut buf, tensor.shape().len() as u32);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Load an estimator from a weight file, taking the architecture from
    /// the file itself.
    pub fn load_weights(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Reader::new(&bytes, "weights");

        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                what: "weights magic",
                detail: "file does not start with RNWT".into(),
            });
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Version {
                what: "weights",
                found: version,
                expected: WEIGHTS_VERSION,
            });
        }
        let fingerprint = String::from_utf8(r.take(16)?.to_vec()).map_err(|_| Error::Format {
            what: "weights fingerprint",
            detail: "not ASCII hex".into(),
        })?;
        let config_len = r.u32()? as usize;
        let config: EstimatorConfig =
            serde_json::from_slice(r.take(config_len)?).map_err(|e| Error::Format {
                what: "weights config",
                detail: e.to_string(),
            })?;
        config.validate()?;
        if config.fingerprint() != fingerprint {
            return Err(Error::Format {
                what: "weights fingerprint",
                detail: format!(
                    "stored {} does not match the stored architecture {}",
                    fingerprint,
                    config.fingerprint()
                ),
            });
        }

        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()?;
            if name_len > MAX_NAME_LEN {
                return Err(Error::Format {
                    what: "weights tensor name",
                    detail: format!("{} bytes exceeds the {} limit", name_len, MAX_NAME_LEN),
                });
            }
            let name =
                String::from_utf8(r.take(name_len as usize)?.to_vec()).map_err(|_| {
                    Error::Format {
                        what: "weights tensor name",
                        detail: "not UTF-8".into(),
                    }
                })?;
            let rank = r.u32()?;
            if rank > MAX_RANK {
                return Err(Error::Format {
                    what: "weights tensor rank",
                    detail: format!("{} exceeds the {} limit", rank, MAX_RANK),
                });
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut len: usize = 1;
            for _ in 0..rank {
                let d = r.u64()? as usize;
                len = len.checked_mul(d).ok_or_else(|| Error::Format {
                    what: "weights tensor shape",
                    detail: format!("dimensions of {} overflow", name),
                })?;
                shape.push(d);
            }
            let data: Vec<Real> = r
                .f64_chunk(len)?
                .map(|v| v as Real)
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Format {
                    what: "weights tensor table",
                    detail: format!("duplicate tensor {}", name),
                });
            }
        }
        r.finish()?;

        let expected = expected_shapes(&config);
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => {
                    return Err(Error::Format {
                        what: "weights tensor table",
                        detail: format!("missing tensor {}", name),
                    })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Format {
                        what: "weights tensor table",
                        detail: format!(
                            "{} has shape {:?}, architecture expects {:?}",
                            name,
                            t.shape(),
                            shape
                        ),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Format {
                what: "weights tensor table",
                detail: format!("unexpected tensor {}", extra),
            });
        }

        let mut params = BTreeMap::new();
        let mut means: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut vars: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, tensor) in tensors {
            if let Some(base) = name.strip_suffix(".running_mean") {
                means.insert(base.to_string(), tensor);
            } else if let Some(base) = name.strip_suffix(".running_var") {
                vars.insert(base.to_string(), tensor);
            } else {
                params.insert(name, tensor);
            }
        }
        let bn_state = means
            .into_iter()
            .map(|(base, running_mean)| {
                let running_var = vars.remove(&base).expect("shape table pairs mean/var");
                (base, BatchNormState { running_mean, running_var })
            })
            .collect();
        Ok(Estimator::from_parts(config, params, bn_state))
    }

    /// Load weights that must belong to `config`'s architecture.
    pub fn load_weights_for(config: &EstimatorConfig, path: &Path) -> Result<Self> {
        let loaded = Self::load_weights(path)?;
        if loaded.fingerprint() != config.fingerprint() {
            return Err(Error::Fingerprint {
                found: loaded.fingerprint(),
                expected: config.fingerprint(),
            });
        }
        Ok(loaded)
    }

    fn tensor_entries(&self) -> Vec<(String, &Tensor)> {
        let mut entries: Vec<(String, &Tensor)> = self
            .params()
            .iter()
            .map(|(name, t)| (name.clone(), t))
            .collect();
        for (name, state) in self.bn_state() {
            entries.push((format!("{}.running_mean", name), &state.running_mean));
            entries.push((format!("{}.running_var", name), &state.running_var));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries
    }
}

fn expected_shapes(config: &EstimatorConfig) -> BTreeMap<String, Vec<usize>> {
    let mut shapes = BTreeMap::new();
    for conv in net::conv_layers(config) {
        shapes.insert(
            format!("{}.conv", conv.name),
            vec![conv.cout, conv.cin, conv.kernel, conv.kernel],
        );
        shapes.insert(format!("{}.gamma", conv.name), vec![conv.cout]);
        shapes.insert(format!("{}.beta", conv.name), vec![conv.cout]);
        shapes.insert(format!("{}.running_mean", conv.name), vec![conv.cout]);
        shapes.insert(format!("{}.running_var", conv.name), vec![conv.cout]);
    }
    let g = config.gap_width;
    shapes.insert("fc_pos.weight".into(), vec![3, g]);
    shapes.insert("fc_pos.bias".into(), vec![3]);
    shapes.insert("fc_att.weight".into(), vec![6, g]);
    shapes.insert("fc_att.bias".into(), vec![6]);
    shapes.insert("sigma_p".into(), vec![1]);
    shapes.insert("sigma_r".into(), vec![1]);
    shapes
}
