//! Checkpoint directories: one `.tns` per parameter, optimiser moments, the
//! resolved config and a manifest.
//!
//! ```text
//! <dir>/config.txt
//! <dir>/manifest.txt      config_hash=…, step=…, then `param <name> <shape> <trainable>`
//! <dir>/params/<name>.tns
//! <dir>/optim/m.<name>.tns, optim/v.<name>.tns   (when optimiser state is saved)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::world::WorldModel;
use crate::autodiff::{Adam, ParamStore};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_tns, write_tns, Tensor};

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: WorldModel,
    pub store: ParamStore<f32>,
    /// Optimiser state when the checkpoint carried one.
    pub adam: Option<Adam<f32>>,
    /// Training steps completed.
    pub step: u64,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    cfg: &RunConfig,
    store: &ParamStore<f32>,
    adam: Option<&Adam<f32>>,
    step: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    mkdir(&dir.join("params"))?;
    cfg.write(dir.join("config.txt"))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "config_hash={}", cfg.model_hash());
    let _ = writeln!(manifest, "step={step}");
    if let Some(a) = adam {
        let _ = writeln!(manifest, "adam_step={}", a.steps_taken());
    }
    for (_, p) in store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "param {} {} {}", p.name, shape.join("x"), p.trainable);
        write_tns(dir.join("params").join(format!("{}.tns", p.name)), &p.value)?;
    }
    if let Some(a) = adam {
        let (_, m, v) = a.state();
        if !m.is_empty() {
            mkdir(&dir.join("optim"))?;
            for ((_, p), (mi, vi)) in store.iter().zip(m.iter().zip(v)) {
                write_tns(dir.join("optim").join(format!("m.{}.tns", p.name)), mi)?;
                write_tns(dir.join("optim").join(format!("v.{}.tns", p.name)), vi)?;
            }
        }
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let config = RunConfig::from_file(dir.join("config.txt"))?;
    let mpath = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let bad = |m: String| Error::data(&mpath, m);

    let mut hash = None;
    let mut step = 0;
    let mut adam_step = None;
    let mut params = Vec::new();
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("config_hash=") {
            hash = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("step=") {
            step = v.parse().map_err(|_| bad(format!("bad step `{v}`")))?;
        } else if let Some(v) = line.strip_prefix("adam_step=") {
            adam_step = Some(v.parse::<u64>().map_err(|_| bad(format!("bad adam_step `{v}`")))?);
        } else if let Some(rest) = line.strip_prefix("param ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(format!("bad param line `{line}`")));
            }
            params.push((f[0].to_string(), f[2] == "true"));
        } else if !line.trim().is_empty() {
            return Err(bad(format!("unexpected line `{line}`")));
        }
    }
    if hash.as_deref() != Some(config.model_hash().as_str()) {
        return Err(bad("config hash does not match config.txt".into()));
    }

    let mut store = ParamStore::new();
    let model = WorldModel::new(&config, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    if params.len() != store.len() {
        return Err(bad(format!("{} parameters listed, model has {}", params.len(), store.len())));
    }
    for (name, trainable) in &params {
        let id = store.id(name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
        let value: Tensor<f32> = read_tns(dir.join("params").join(format!("{name}.tns")))?;
        store.set_value(id, value)?;
        store.get_mut(id).trainable = *trainable;
    }

    let adam = match adam_step {
        None => None,
        Some(n) => {
            let mut a = Adam::new(config.lr);
            a.clip_norm = (config.clip_norm > 0.0).then_some(config.clip_norm);
            if dir.join("optim").is_dir() {
                let mut m = Vec::with_capacity(store.len());
                let mut v = Vec::with_capacity(store.len());
                for (_, p) in store.iter() {
                    m.push(read_tns(dir.join("optim").join(format!("m.{}.tns", p.name)))?);
                    v.push(read_tns(dir.join("optim").join(format!("v.{}.tns", p.name)))?);
                }
                a.restore(n, m, v);
            } else {
                a.restore(n, Vec::new(), Vec::new());
            }
            Some(a)
        }
    };
    Ok(Checkpoint {
        config,
        model,
        store,
        adam,
        step,
    })
}
