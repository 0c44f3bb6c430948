//! Binary checkpoint: configuration text, seed, weights and optimizer state.
//!
//! Layout (little endian):
//!
//! ```text
//! b"DALEBPCK" | version u32 | config_len u32 | config utf8 | seed u64
//! | n_matrices u32 | matrices...
//! | has_optimizer u8 | [kind u8 | lr, beta1, beta2, eps, wd f64 | step u64
//!                      | n_moments u32 | (first, second)... ]
//! ```
//!
//! Matrices and moments use the [`DaleMatrix`] encoding; moments are stored
//! as mixed-sign matrices named after the weight they belong to.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::dale::{DaleMatrix, PreSign};
use crate::error::{Error, Result};
use crate::learning::{AdamWConfig, OptimizerKind, OptimizerState};
use crate::network::Network;

const MAGIC: &[u8; 8] = b"DALEBPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Configuration the run was started from, verbatim.
    pub config: String,
    pub seed: u64,
    pub matrices: Vec<DaleMatrix>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture(config: impl Into<String>, seed: u64, net: &Network, opt: Option<&OptimizerState>) -> Self {
        Self {
            config: config.into(),
            seed,
            matrices: net.matrices().into_iter().cloned().collect(),
            optimizer: opt.cloned(),
        }
    }

    /// Loads every stored matrix into `net`.
    pub fn restore(&self, net: &mut Network) -> Result<()> {
        for m in &self.matrices {
            net.load_matrix(m.clone())?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.config.len() as u32)?;
        w.write_all(self.config.as_bytes())?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(self.matrices.len() as u32)?;
        for m in &self.matrices {
            m.write_to(w)?;
        }
        match &self.optimizer {
            None => w.write_u8(0)?,
            Some(opt) => {
                w.write_u8(1)?;
                let (kind, c) = match opt.kind {
                    OptimizerKind::AdamW(c) => (0u8, c),
                    OptimizerKind::Sgd { lr } => (1u8, AdamWConfig { lr, ..AdamWConfig::default() }),
                };
                w.write_u8(kind)?;
                for x in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    w.write_f64::<LittleEndian>(x)?;
                }
                w.write_u64::<LittleEndian>(opt.step)?;
                w.write_u32::<LittleEndian>(opt.first.len() as u32)?;
                for (name, m) in &opt.first {
                    let v = opt.second.get(name).ok_or_else(|| {
                        Error::Format(format!("optimizer has a first moment but no second for `{name}`"))
                    })?;
                    DaleMatrix::new(name.clone(), PreSign::Mixed, m.clone())?.write_to(w)?;
                    DaleMatrix::new(name.clone(), PreSign::Mixed, v.clone())?.write_to(w)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut config = vec![0u8; len];
        r.read_exact(&mut config)?;
        let config = String::from_utf8(config).map_err(|e| Error::Format(format!("config text: {e}")))?;
        let seed = r.read_u64::<LittleEndian>()?;
        let n = r.read_u32::<LittleEndian>()?;
        let matrices = (0..n).map(|_| DaleMatrix::read_from(r)).collect::<Result<Vec<_>>>()?;
        let optimizer = match r.read_u8()? {
            0 => None,
            1 => {
                let kind = r.read_u8()?;
                let mut f = [0.0; 5];
                r.read_f64_into::<LittleEndian>(&mut f)?;
                let kind = match kind {
                    0 => OptimizerKind::AdamW(AdamWConfig {
                        lr: f[0],
                        beta1: f[1],
                        beta2: f[2],
                        eps: f[3],
                        weight_decay: f[4],
                    }),
                    1 => OptimizerKind::Sgd { lr: f[0] },
                    k => return Err(Error::Format(format!("unknown optimizer kind {k}"))),
                };
                let mut opt = OptimizerState::new(kind);
                opt.step = r.read_u64::<LittleEndian>()?;
                for _ in 0..r.read_u32::<LittleEndian>()? {
                    let m = DaleMatrix::read_from(r)?;
                    let v = DaleMatrix::read_from(r)?;
                    if m.name() != v.name() || m.shape() != v.shape() {
                        return Err(Error::Format(format!("mismatched moments for `{}`", m.name())));
                    }
                    opt.first.insert(m.name().to_string(), m.values().clone());
                    opt.second.insert(v.name().to_string(), v.values().clone());
                }
                Some(opt)
            }
            b => return Err(Error::Format(format!("bad optimizer flag {b}"))),
        };
        Ok(Self {
            config,
            seed,
            matrices,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
