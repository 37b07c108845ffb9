//! Named parameter bundles.

use crate::aqclip::AqClipConfig;
use crate::error::{Error, Result};
use crate::microclamp::MicroClampConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub microclamp: Option<MicroClampConfig>,
    pub aqclip: Option<AqClipConfig>,
}

pub const PRESET_NAMES: [&str; 3] = ["paper-default", "conservative", "off"];

impl Preset {
    pub fn by_name(name: &str) -> Result<Preset> {
        match name {
            "paper-default" => Ok(Preset {
                name: "paper-default",
                microclamp: Some(MicroClampConfig::default()),
                aqclip: Some(AqClipConfig::default()),
            }),
            "conservative" => Ok(Preset {
                name: "conservative",
                microclamp: Some(MicroClampConfig {
                    alpha: 1.5,
                    ..Default::default()
                }),
                aqclip: Some(AqClipConfig {
                    alpha: 1.5,
                    ema_beta: 0.9,
                    ..Default::default()
                }),
            }),
            "off" => Ok(Preset {
                name: "off",
                microclamp: None,
                aqclip: None,
            }),
            other => Err(Error::invalid(format!(
                "unknown preset {other:?}; available: {}",
                PRESET_NAMES.join(", ")
            ))),
        }
    }
}
