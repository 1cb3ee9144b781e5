use std::fmt::Write as _;
use std::path::Path;

use super::read_to_string;
use crate::error::{Error, Result};

/// Parses `key = value` lines; `#` starts a comment. Keys keep file order.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: Default::default(),
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Every tunable of the pipeline, loaded from a flat config file with
/// command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Neighborhood size of the encoder graph.
    pub k: usize,
    /// Points per sub-cloud per structure.
    pub m: usize,
    pub subclouds: usize,
    pub heads: usize,
    /// Hidden feature width `d`.
    pub width: usize,
    /// Output width of the learnable edge function.
    pub edge_width: usize,
    /// Total positional code width `C`.
    pub pos_width: usize,
    pub lstm_depth: usize,
    /// LSTM increments `T`.
    pub steps: usize,
    pub lambda_cd: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
    /// Use squared norms in the smoothness term.
    pub smooth_squared: bool,
    /// Gaussian instead of uniform aggregation weights in the graph feature.
    pub gaussian_edge_weights: bool,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Reconstruction neighborhood; `None` scales with the cloud size.
    pub k_rec: Option<usize>,
    pub jacobi_max_iters: usize,
    pub jacobi_tol: f64,
    /// Rebuild reconstruction weights from the current displacement iterate.
    pub displacement_kernel: bool,
    pub symmetric_weights: bool,
    /// Length scale (mm) dividing coordinates before the perceptrons.
    pub coord_scale: f64,
    /// Displacement scale (mm) of the read-out and feedback channels.
    pub disp_scale: f64,
    pub n_bone: usize,
    pub n_face: usize,
    /// Width (mm) of the synthetic tissue kernel.
    pub tau_kernel: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 8,
            m: 128,
            subclouds: 5,
            heads: 4,
            width: 64,
            edge_width: 16,
            pos_width: 24,
            lstm_depth: 3,
            steps: 3,
            lambda_cd: 1.0,
            lambda_s: 0.1,
            lambda_p: 0.1,
            smooth_squared: false,
            gaussian_edge_weights: false,
            lr: 1e-3,
            batch: 8,
            epochs: 50,
            seed: 42,
            k_rec: Some(10),
            jacobi_max_iters: 200,
            jacobi_tol: 1e-4,
            displacement_kernel: false,
            symmetric_weights: false,
            coord_scale: 50.0,
            disp_scale: 10.0,
            n_bone: 640,
            n_face: 2000,
            tau_kernel: 15.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::invalid(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut cfg = Self::default();
        for (line, k, v) in parse_key_values(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            other => other,
        })? {
            cfg.set(&k, &v).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "k" => self.k = parse_num(key, v)?,
            "m" => self.m = parse_num(key, v)?,
            "subclouds" => self.subclouds = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "edge_width" => self.edge_width = parse_num(key, v)?,
            "pos_width" => self.pos_width = parse_num(key, v)?,
            "lstm_depth" => self.lstm_depth = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "lambda_cd" => self.lambda_cd = parse_num(key, v)?,
            "lambda_s" => self.lambda_s = parse_num(key, v)?,
            "lambda_p" => self.lambda_p = parse_num(key, v)?,
            "smooth_squared" => self.smooth_squared = parse_bool(key, v)?,
            "gaussian_edge_weights" => self.gaussian_edge_weights = parse_bool(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "k_rec" => {
                self.k_rec = match v {
                    "auto" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "jacobi_max_iters" => self.jacobi_max_iters = parse_num(key, v)?,
            "jacobi_tol" => self.jacobi_tol = parse_num(key, v)?,
            "displacement_kernel" => self.displacement_kernel = parse_bool(key, v)?,
            "symmetric_weights" => self.symmetric_weights = parse_bool(key, v)?,
            "coord_scale" => self.coord_scale = parse_num(key, v)?,
            "disp_scale" => self.disp_scale = parse_num(key, v)?,
            "n_bone" => self.n_bone = parse_num(key, v)?,
            "n_face" => self.n_face = parse_num(key, v)?,
            "tau_kernel" => self.tau_kernel = parse_num(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order, then validates.
    pub fn with_overrides<'a>(mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("m", self.m),
            ("subclouds", self.subclouds),
            ("heads", self.heads),
            ("width", self.width),
            ("edge_width", self.edge_width),
            ("pos_width", self.pos_width),
            ("lstm_depth", self.lstm_depth),
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("jacobi_max_iters", self.jacobi_max_iters),
            ("n_bone", self.n_bone),
            ("n_face", self.n_face),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("`{name}` must be positive")));
            }
        }
        if self.steps < 2 {
            return Err(Error::invalid("`steps` (T) must be at least 2"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        if self.pos_width % 2 != 0 || self.pos_width < 6 {
            return Err(Error::invalid("`pos_width` must be even and at least 6"));
        }
        if self.k_rec == Some(0) {
            return Err(Error::invalid("`k_rec` must be positive"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("jacobi_tol", self.jacobi_tol),
            ("coord_scale", self.coord_scale),
            ("disp_scale", self.disp_scale),
            ("tau_kernel", self.tau_kernel),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("`{name}` must be positive")));
            }
        }
        let lambdas = [self.lambda_cd, self.lambda_s, self.lambda_p];
        if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) || lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::invalid("loss weights must be nonnegative and not all zero"));
        }
        Ok(())
    }

    /// Reconstruction neighborhood for a cloud of `n` points. Unset `k_rec`
    /// uses 0.05% of the cloud, at least 4.
    pub fn k_rec_for(&self, n: usize) -> usize {
        self.k_rec
            .unwrap_or_else(|| ((n as f64) * 0.0005).round().max(4.0) as usize)
            .min(n.saturating_sub(1).max(1))
    }

    /// Serializes to the same `key = value` format [`Self::load`] reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "subclouds = {}", self.subclouds);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "edge_width = {}", self.edge_width);
        let _ = writeln!(s, "pos_width = {}", self.pos_width);
        let _ = writeln!(s, "lstm_depth = {}", self.lstm_depth);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "lambda_cd = {}", self.lambda_cd);
        let _ = writeln!(s, "lambda_s = {}", self.lambda_s);
        let _ = writeln!(s, "lambda_p = {}", self.lambda_p);
        let _ = writeln!(s, "smooth_squared = {}", self.smooth_squared);
        let _ = writeln!(s, "gaussian_edge_weights = {}", self.gaussian_edge_weights);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        match self.k_rec {
            Some(k) => {
                let _ = writeln!(s, "k_rec = {k}");
            }
            None => {
                let _ = writeln!(s, "k_rec = auto");
            }
        }
        let _ = writeln!(s, "jacobi_max_iters = {}", self.jacobi_max_iters);
        let _ = writeln!(s, "jacobi_tol = {}", self.jacobi_tol);
        let _ = writeln!(s, "displacement_kernel = {}", self.displacement_kernel);
        let _ = writeln!(s, "symmetric_weights = {}", self.symmetric_weights);
        let _ = writeln!(s, "coord_scale = {}", self.coord_scale);
        let _ = writeln!(s, "disp_scale = {}", self.disp_scale);
        let _ = writeln!(s, "n_bone = {}", self.n_bone);
        let _ = writeln!(s, "n_face = {}", self.n_face);
        let _ = writeln!(s, "tau_kernel = {}", self.tau_kernel);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.lr = 3.5e-3;
        cfg.k_rec = None;
        cfg.smooth_squared = true;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, cfg.to_text()).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let base = RunConfig::default();
        assert!(base.clone().with_overrides(["steps=1"]).is_err());
        assert!(base.clone().with_overrides(["heads=5"]).is_err());
        assert!(base.clone().with_overrides(["subclouds=0"]).is_err());
        assert!(base.clone().with_overrides(["pos_width=7"]).is_err());
        assert!(base.clone().with_overrides(["bogus=1"]).is_err());
        assert!(base
            .clone()
            .with_overrides(["lambda_cd=0", "lambda_s=0", "lambda_p=0"])
            .is_err());
        assert_eq!(base.with_overrides(["m = 64"]).unwrap().m, 64);
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        std::fs::write(&p, "# header\nk = 4\nwidth 32\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn auto_k_rec_scales_with_size() {
        let cfg = RunConfig {
            k_rec: None,
            ..RunConfig::default()
        };
        assert_eq!(cfg.k_rec_for(20_000), 10);
        assert_eq!(cfg.k_rec_for(200_000), 100);
        assert_eq!(cfg.k_rec_for(100), 4);
    }
}
