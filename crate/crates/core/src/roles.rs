use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{CLIMATE_CHANNELS, PRECT};

/// A climate variable and whether the model generates it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelRole {
    pub name: String,
    pub is_target: bool,
}

/// Which variables the model produces: one (`PRECT`) or all of its inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IoConfig {
    #[serde(rename = "3in3out")]
    ThreeInThreeOut,
    #[serde(rename = "3in1out")]
    ThreeInOneOut,
}

impl IoConfig {
    pub const ALL: [IoConfig; 2] = [IoConfig::ThreeInThreeOut, IoConfig::ThreeInOneOut];

    pub fn roles(self) -> Vec<ChannelRole> {
        CLIMATE_CHANNELS
            .iter()
            .map(|&name| ChannelRole {
                name: name.to_string(),
                is_target: self == IoConfig::ThreeInThreeOut || name == PRECT,
            })
            .collect()
    }

    pub fn target_channels(self) -> Vec<String> {
        self.roles().into_iter().filter(|r| r.is_target).map(|r| r.name).collect()
    }

    pub fn num_targets(self) -> usize {
        match self {
            IoConfig::ThreeInThreeOut => 3,
            IoConfig::ThreeInOneOut => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IoConfig::ThreeInThreeOut => "3in3out",
            IoConfig::ThreeInOneOut => "3in1out",
        }
    }
}

impl fmt::Display for IoConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IoConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3in3out" => Ok(IoConfig::ThreeInThreeOut),
            "3in1out" => Ok(IoConfig::ThreeInOneOut),
            other => Err(Error::Config(format!("unknown io config `{other}` (expected 3in3out or 3in1out)"))),
        }
    }
}

/// Downscaling methods in the row order of the comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bilinear,
    Bicubic,
    Srresnet,
    Unet,
    Ddpm,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Bilinear, Method::Bicubic, Method::Srresnet, Method::Unet, Method::Ddpm];

    /// Interpolation methods have no parameters and ignore the io config.
    pub fn is_learned(self) -> bool {
        !matches!(self, Method::Bilinear | Method::Bicubic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bilinear => "bilinear",
            Method::Bicubic => "bicubic",
            Method::Srresnet => "srresnet",
            Method::Unet => "unet",
            Method::Ddpm => "ddpm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!("unknown method `{s}` (expected bilinear, bicubic, srresnet, unet or ddpm)"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_one_target_in_3in1out() {
        let roles = IoConfig::ThreeInOneOut.roles();
        assert_eq!(roles.iter().filter(|r| r.is_target).count(), 1);
        assert_eq!(IoConfig::ThreeInOneOut.target_channels(), vec![PRECT.to_string()]);
        assert!(IoConfig::ThreeInThreeOut.roles().iter().all(|r| r.is_target));
    }

    #[test]
    fn parse_round_trip() {
        for io in IoConfig::ALL {
            assert_eq!(io.as_str().parse::<IoConfig>().unwrap(), io);
        }
        assert!("2in1out".parse::<IoConfig>().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("ddim".parse::<Method>().is_err());
        assert!(Method::Bilinear < Method::Ddpm && !Method::Bicubic.is_learned());
    }
}
