//! Train-config documents and small argv value parsers.
//!
//! The config file is flat `key=value` text ('#' comments allowed) whose keys
//! mirror the model and training structs field for field, plus `data` (XYZ
//! path, required), `frac_train`/`frac_val`/`frac_test` (default 0.8/0.1/0.1),
//! and `scheme`. Unknown keys are rejected rather than ignored so typos
//! cannot silently fall back to defaults.

use std::path::PathBuf;

use equiquant::model::{ModelConfig, QuantScheme};
use equiquant::records::parse_kv_document;
use equiquant::train::TrainConfig;
use equiquant::{CoreError, Real, Result};

#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: PathBuf,
    pub fractions: (Real, Real, Real),
}

pub fn parse_train_setup(text: &str) -> Result<TrainSetup> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    let mut data: Option<PathBuf> = None;
    let mut fractions = (0.8, 0.1, 0.1);
    for (k, v) in parse_kv_document(text)? {
        match k.as_str() {
            "f0" => model.f0 = field(&k, &v)?,
            "f1" => model.f1 = field(&k, &v)?,
            "n_layers" => model.n_layers = field(&k, &v)?,
            "n_rbf" => model.n_rbf = field(&k, &v)?,
            "cutoff" => model.cutoff = field(&k, &v)?,
            "d_attn" => model.d_attn = field(&k, &v)?,
            "species" => model.species = list(&k, &v)?,
            "epochs" => train.epochs = field(&k, &v)?,
            "warmup_epochs" => train.warmup_epochs = field(&k, &v)?,
            "lr" => train.lr = field(&k, &v)?,
            "lambda_e" => train.lambda_e = field(&k, &v)?,
            "lambda_f" => train.lambda_f = field(&k, &v)?,
            "lambda_lee" => train.lambda_lee = field(&k, &v)?,
            "n_lee_rotations" => train.n_lee_rotations = field(&k, &v)?,
            "batch_size" => train.batch_size = field(&k, &v)?,
            "seed" => train.seed = field(&k, &v)?,
            "scheme" => train.scheme = QuantScheme::parse(&v)?,
            "data" => data = Some(PathBuf::from(v)),
            "frac_train" => fractions.0 = field(&k, &v)?,
            "frac_val" => fractions.1 = field(&k, &v)?,
            "frac_test" => fractions.2 = field(&k, &v)?,
            other => {
                return Err(CoreError::Config(format!("unknown config key '{other}'")));
            }
        }
    }
    let data =
        data.ok_or_else(|| CoreError::Config("config is missing the 'data' key".into()))?;
    Ok(TrainSetup {
        model,
        train,
        data,
        fractions,
    })
}

impl TrainSetup {
    /// Every resolved setting, for the run manifest.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let t = &self.train;
        let species = m
            .species
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let pairs: Vec<(&str, String)> = vec![
            ("data", self.data.display().to_string()),
            ("frac_train", self.fractions.0.to_string()),
            ("frac_val", self.fractions.1.to_string()),
            ("frac_test", self.fractions.2.to_string()),
            ("f0", m.f0.to_string()),
            ("f1", m.f1.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_rbf", m.n_rbf.to_string()),
            ("cutoff", m.cutoff.to_string()),
            ("d_attn", m.d_attn.to_string()),
            ("species", species),
            ("epochs", t.epochs.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("lr", t.lr.to_string()),
            ("lambda_e", t.lambda_e.to_string()),
            ("lambda_f", t.lambda_f.to_string()),
            ("lambda_lee", t.lambda_lee.to_string()),
            ("n_lee_rotations", t.n_lee_rotations.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("scheme", t.scheme.name().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

fn field<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| CoreError::Config(format!("config key '{key}'='{v}': {e}")))
}

fn list(key: &str, v: &str) -> Result<Vec<u32>> {
    v.split(',').map(|tok| field(key, tok.trim())).collect()
}

/// `LO..HI` or `LO..=HI`, both inclusive. None means "not range syntax";
/// the caller turns that into a usage error.
pub fn parse_atoms(s: &str) -> Option<(usize, usize)> {
    let (lo, hi) = s.split_once("..")?;
    let hi = hi.strip_prefix('=').unwrap_or(hi);
    Some((lo.trim().parse().ok()?, hi.trim().parse().ok()?))
}

/// Comma-separated bit widths: `2,4,8`.
pub fn parse_bits(s: &str) -> Option<Vec<u8>> {
    let v: Option<Vec<u8>> = s.split(',').map(|tok| tok.trim().parse().ok()).collect();
    v.filter(|b| !b.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atoms_range_forms() {
        assert_eq!(parse_atoms("8..16"), Some((8, 16)));
        assert_eq!(parse_atoms("8..=16"), Some((8, 16)));
        assert_eq!(parse_atoms("3..3"), Some((3, 3)));
        assert_eq!(parse_atoms("8-16"), None);
        assert_eq!(parse_atoms("..16"), None);
        assert_eq!(parse_atoms("8..x"), None);
    }

    #[test]
    fn bits_list() {
        assert_eq!(parse_bits("2,4,8"), Some(vec![2, 4, 8]));
        assert_eq!(parse_bits("8"), Some(vec![8]));
        assert_eq!(parse_bits(""), None);
        assert_eq!(parse_bits("2,,8"), None);
        assert_eq!(parse_bits("2,banana"), None);
    }

    #[test]
    fn config_round_trip_and_rejects() {
        let setup = parse_train_setup(
            "# comment\n\
             data = train.xyz\n\
             f0=16\nf1=8\nn_layers=2\nn_rbf=12\ncutoff=4.5\nd_attn=24\nspecies=1,6\n\
             epochs=7\nwarmup_epochs=2\nlr=0.001\nlambda_e=2\nlambda_f=5\nlambda_lee=0.1\n\
             n_lee_rotations=3\nbatch_size=4\nseed=11\nscheme=w4a8\n\
             frac_train=0.7\nfrac_val=0.2\nfrac_test=0.1\n",
        )
        .unwrap();
        assert_eq!(setup.model.f0, 16);
        assert_eq!(setup.model.species, vec![1, 6]);
        assert_eq!(setup.train.epochs, 7);
        assert_eq!(setup.train.scheme, QuantScheme::W4A8);
        assert_eq!(setup.data, PathBuf::from("train.xyz"));
        assert_eq!(setup.fractions, (0.7, 0.2, 0.1));
        // defaults fill whatever the file leaves out
        let d = parse_train_setup("data=x.xyz\n").unwrap();
        assert_eq!(d.train.epochs, TrainConfig::default().epochs);
        assert_eq!(d.fractions, (0.8, 0.1, 0.1));

        assert!(parse_train_setup("").is_err()); // no data key
        assert!(parse_train_setup("data=x\nepohcs=3\n").is_err()); // typo
        assert!(parse_train_setup("data=x\nepochs=fast\n").is_err());
        assert!(parse_train_setup("data=x\nscheme=int7\n").is_err());
    }
}
