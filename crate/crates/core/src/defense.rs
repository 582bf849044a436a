//! A common front over the dimensionality-reduction defenses.
//!
//! A [`DefenseMethod`] is a defense without its information fraction; pairing
//! it with one gives a [`DefenseConfig`]. Images can be prepared once and then
//! reconstructed cheaply at every fraction of a tuning grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::svd::{defend_svd_with, MassMode, PreparedSvd};
use crate::tsne::{defend_tsne, PreparedTsne, TsneConfig};

pub const DEFAULT_BLOCK: usize = 4;

fn default_block() -> usize {
    DEFAULT_BLOCK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseMethod {
    /// Leaves images untouched at every fraction.
    Identity,
    Svd {
        #[serde(default)]
        mode: MassMode,
    },
    Tsne {
        #[serde(default)]
        tsne: TsneConfig,
        #[serde(default = "default_block")]
        block: usize,
    },
}

impl DefenseMethod {
    pub fn svd() -> Self {
        DefenseMethod::Svd { mode: MassMode::Sigma }
    }

    pub fn tsne() -> Self {
        DefenseMethod::Tsne { tsne: TsneConfig::default(), block: DEFAULT_BLOCK }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DefenseMethod::Identity => "identity",
            DefenseMethod::Svd { .. } => "svd",
            DefenseMethod::Tsne { .. } => "tsne",
        }
    }

    /// Checks the method against the image side it will be applied to.
    pub fn validate(&self, image_side: usize) -> Result<()> {
        if let DefenseMethod::Tsne { tsne, block } = self {
            tsne.validate()?;
            if *block == 0 || !image_side.is_multiple_of(*block) {
                return Err(Error::invalid(format!("block {block} must divide image side {image_side}")));
            }
            let tiles = (image_side / block).pow(2);
            if tiles < 3 {
                return Err(Error::invalid("tile-blend defense needs at least three tiles"));
            }
            if tsne.perplexity >= tiles as f64 {
                return Err(Error::invalid(format!(
                    "perplexity {} must be below the tile count {tiles}",
                    tsne.perplexity
                )));
            }
        }
        Ok(())
    }

    pub fn prepare(&self, x: &ImageTensor) -> Result<PreparedImage> {
        Ok(match self {
            DefenseMethod::Identity => PreparedImage::Identity(x.clone()),
            DefenseMethod::Svd { mode } => PreparedImage::Svd(PreparedSvd::new(x)?, *mode),
            DefenseMethod::Tsne { tsne, block } => PreparedImage::Tsne(PreparedTsne::new(x, tsne, *block)?),
        })
    }

    pub fn prepare_all<'a>(&self, images: impl IntoIterator<Item = &'a ImageTensor>) -> Result<Vec<PreparedImage>> {
        images.into_iter().map(|x| self.prepare(x)).collect()
    }

    pub fn apply(&self, x: &ImageTensor, info: f64) -> Result<ImageTensor> {
        check_info(info)?;
        match self {
            DefenseMethod::Identity => Ok(x.clone()),
            DefenseMethod::Svd { mode } => defend_svd_with(x, info, *mode),
            DefenseMethod::Tsne { tsne, block } => defend_tsne(x, tsne, info, *block),
        }
    }
}

/// A defense method fixed at one information fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub method: DefenseMethod,
    pub info: f64,
}

impl DefenseConfig {
    pub fn new(method: DefenseMethod, info: f64) -> Result<Self> {
        check_info(info)?;
        Ok(DefenseConfig { method, info })
    }

    pub fn identity() -> Self {
        DefenseConfig { method: DefenseMethod::Identity, info: 1.0 }
    }

    pub fn apply(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.method.apply(x, self.info)
    }
}

/// Per-image state from [`DefenseMethod::prepare`].
#[derive(Debug, Clone)]
pub enum PreparedImage {
    Identity(ImageTensor),
    Svd(PreparedSvd, MassMode),
    Tsne(PreparedTsne),
}

impl PreparedImage {
    pub fn reconstruct(&self, info: f64) -> Result<ImageTensor> {
        check_info(info)?;
        match self {
            PreparedImage::Identity(x) => Ok(x.clone()),
            PreparedImage::Svd(p, mode) => p.reconstruct(info, *mode),
            PreparedImage::Tsne(p) => p.reconstruct(info),
        }
    }
}

pub(crate) fn check_info(info: f64) -> Result<()> {
    if !(info.is_finite() && info > 0.0 && info <= 1.0) {
        return Err(Error::invalid(format!("information fraction {info} must lie in (0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::gen_shapes_dataset;
    use crate::svd::defend_svd;

    #[test]
    fn json_forms() {
        let m: DefenseMethod = serde_json::from_str(r#"{"method":"svd"}"#).unwrap();
        assert_eq!(m, DefenseMethod::svd());
        let m: DefenseMethod = serde_json::from_str(r#"{"method":"tsne","block":8}"#).unwrap();
        assert_eq!(m, DefenseMethod::Tsne { tsne: TsneConfig::default(), block: 8 });
        assert!(serde_json::from_str::<DefenseMethod>(r#"{"method":"svd","rank":3}"#).is_err());
        assert!(serde_json::from_str::<DefenseMethod>(r#"{"method":"pca"}"#).is_err());
        let back: DefenseMethod =
            serde_json::from_str(&serde_json::to_string(&DefenseMethod::tsne()).unwrap()).unwrap();
        assert_eq!(back, DefenseMethod::tsne());
    }

    #[test]
    fn prepared_matches_direct() {
        let ds = gen_shapes_dataset(3, 5, 16).unwrap();
        let x = &ds.items()[0].0;
        let prepared = DefenseMethod::svd().prepare(x).unwrap();
        for info in [0.5, 0.9, 1.0] {
            assert_eq!(prepared.reconstruct(info).unwrap(), defend_svd(x, info).unwrap());
        }
    }

    #[test]
    fn validation() {
        assert!(DefenseMethod::tsne().validate(32).is_ok());
        assert!(DefenseMethod::tsne().validate(30).is_err());
        assert!(DefenseMethod::tsne().validate(8).is_err());
        assert!(DefenseMethod::Identity.apply(&ImageTensor::filled(4, 4, 0.1), 1.5).is_err());
        assert!(DefenseConfig::new(DefenseMethod::svd(), 0.0).is_err());
    }
}
