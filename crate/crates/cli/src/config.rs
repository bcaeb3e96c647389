//! Run configuration: TOML file merged under command-line flags.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::report::Format;

/// Single-valued list flags; a plain `Vec` would make clap expect repeated flags.
pub type SiteList = Vec<[i64; 2]>;
pub type FloatList = Vec<f64>;

/// Every key is optional; missing keys fall back to per-command defaults.
#[derive(Clone, Debug, Default, PartialEq, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Tangential sites, e.g. `1,2;3,1`.
    #[arg(long, value_parser = parse_sites)]
    #[serde(default)]
    pub sites: Option<SiteList>,
    /// Amplitudes `ξ`, comma separated.
    #[arg(long, value_parser = parse_floats)]
    #[serde(default)]
    pub xi: Option<FloatList>,
    #[arg(long)]
    #[serde(default)]
    pub eps: Option<f64>,
    /// Parameter box `lo,hi`.
    #[arg(long = "box", value_parser = parse_floats)]
    #[serde(default, rename = "box")]
    pub xi_box: Option<FloatList>,
    /// Number of tangential sites for `admissible`.
    #[arg(long)]
    #[serde(default)]
    pub b: Option<usize>,
    /// Site bound for `admissible` and window radius for `resonances`.
    #[arg(long)]
    #[serde(default)]
    pub bound: Option<i64>,
    #[arg(long)]
    #[serde(default)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(default)]
    pub check_bound: Option<i64>,
    #[arg(long)]
    #[serde(default)]
    pub mode_bound: Option<i64>,
    #[arg(long)]
    #[serde(default)]
    pub degree_bound: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub r0: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    pub s0: Option<f64>,
    #[arg(long = "K0")]
    #[serde(default, rename = "K0")]
    pub k0: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    pub tau: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    pub lie_order: Option<usize>,
    /// Truncation `K` for `measure`.
    #[arg(long = "K")]
    #[serde(default, rename = "K")]
    pub k: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub samples: Option<usize>,
    #[arg(long, value_parser = parse_floats)]
    #[serde(default)]
    pub gammas: Option<FloatList>,
    /// Integration time for `validate`.
    #[arg(long)]
    #[serde(default)]
    pub t_final: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    pub dt: Option<f64>,
    /// Output directory; also read from `KAMDESK_OUT_DIR`.
    #[arg(long, env = "KAMDESK_OUT_DIR")]
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(default)]
    pub format: Option<Format>,
}

pub fn parse_sites(s: &str) -> Result<SiteList, String> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let v: Vec<&str> = p.split(',').collect();
            if v.len() != 2 {
                return Err(format!("site `{p}` needs two coordinates"));
            }
            let a = v[0].trim().parse::<i64>().map_err(|e| format!("site `{p}`: {e}"))?;
            let b = v[1].trim().parse::<i64>().map_err(|e| format!("site `{p}`: {e}"))?;
            Ok([a, b])
        })
        .collect()
}

pub fn parse_floats(s: &str) -> Result<FloatList, String> {
    s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"))).collect()
}

macro_rules! merge_fields {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    pub fn from_toml(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// `self` overridden by every key that `flags` sets.
    pub fn overridden_by(mut self, flags: &RunConfig) -> RunConfig {
        merge_fields!(self, flags; sites, xi, eps, xi_box, b, bound, seed, check_bound, mode_bound, degree_bound,
            r0, s0, k0, gamma, tau, steps, lie_order, k, samples, gammas, t_final, dt, out, format);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let file: RunConfig = toml::from_str("eps = 0.1\nseed = 3\nsites = [[1, 2], [3, 1]]\n").unwrap();
        let flags = RunConfig { eps: Some(0.2), ..Default::default() };
        let m = file.overridden_by(&flags);
        assert_eq!(m.eps, Some(0.2));
        assert_eq!(m.seed, Some(3));
        assert_eq!(m.sites, Some(vec![[1, 2], [3, 1]]));
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(toml::from_str::<RunConfig>("epsilon = 0.1\n").is_err());
    }

    #[test]
    fn site_list_parses() {
        assert_eq!(parse_sites("1,2;3,-1").unwrap(), vec![[1, 2], [3, -1]]);
        assert!(parse_sites("1,2,3").is_err());
    }
}
