//! Closed-form reporting models. Pure functions of their parameters; the
//! simulator never reads them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Model {
    HonestQuorumProb,
    ShardedThroughput,
    BlockThroughputPaper,
    BlockThroughputConsistent,
    MaliciousThroughput,
    NetLatency,
    CommitteeLatency,
    AdversaryTakeover,
    FaultProb,
    LockOverhead,
    DoSProb,
}

impl Model {
    pub const ALL: [Model; 11] = [
        Model::HonestQuorumProb,
        Model::ShardedThroughput,
        Model::BlockThroughputPaper,
        Model::BlockThroughputConsistent,
        Model::MaliciousThroughput,
        Model::NetLatency,
        Model::CommitteeLatency,
        Model::AdversaryTakeover,
        Model::FaultProb,
        Model::LockOverhead,
        Model::DoSProb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Model::HonestQuorumProb => "HonestQuorumProb",
            Model::ShardedThroughput => "ShardedThroughput",
            Model::BlockThroughputPaper => "BlockThroughputPaper",
            Model::BlockThroughputConsistent => "BlockThroughputConsistent",
            Model::MaliciousThroughput => "MaliciousThroughput",
            Model::NetLatency => "NetLatency",
            Model::CommitteeLatency => "CommitteeLatency",
            Model::AdversaryTakeover => "AdversaryTakeover",
            Model::FaultProb => "FaultProb",
            Model::LockOverhead => "LockOverhead",
            Model::DoSProb => "DoSProb",
        }
    }

    /// Parameter names, in the order they are documented.
    pub fn params(self) -> &'static [&'static str] {
        match self {
            Model::HonestQuorumProb => &["n_h", "N", "k"],
            Model::ShardedThroughput => &["n_s", "t_s"],
            Model::BlockThroughputPaper | Model::BlockThroughputConsistent => &["B", "t_avg", "t_block"],
            Model::MaliciousThroughput => &["T_ideal", "f", "N"],
            Model::NetLatency => &["T_process", "T_comm", "N_shards"],
            Model::CommitteeLatency => &["N_nodes", "C_range", "delta_comm"],
            Model::AdversaryTakeover => &["f", "n", "s"],
            Model::FaultProb => &["m", "t"],
            Model::LockOverhead => &["T_cross", "L_account", "T_intra"],
            Model::DoSProb => &["T_attack", "T_threshold", "M_malicious", "N"],
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Model::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::ModelDomain {
                param: "name".into(),
                reason: format!("unknown model `{s}`"),
            })
    }
}

pub type Params = BTreeMap<String, f64>;

/// Parses `k=v,k=v`.
pub fn parse_params(text: &str) -> Result<Params> {
    let mut out = Params::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::ModelDomain {
            param: part.into(),
            reason: "expected key=value".into(),
        })?;
        let v: f64 = v.trim().parse().map_err(|_| Error::ModelDomain {
            param: k.trim().into(),
            reason: format!("`{}` is not a number", v.trim()),
        })?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}

fn bad(param: &str, reason: impl Into<String>) -> Error {
    Error::ModelDomain {
        param: param.into(),
        reason: reason.into(),
    }
}

struct Args<'a> {
    p: &'a Params,
}

impl Args<'_> {
    fn get(&self, k: &str) -> Result<f64> {
        let v = *self.p.get(k).ok_or_else(|| bad(k, "missing"))?;
        if !v.is_finite() {
            return Err(bad(k, "must be finite"));
        }
        Ok(v)
    }

    fn nonneg(&self, k: &str) -> Result<f64> {
        let v = self.get(k)?;
        if v < 0.0 {
            return Err(bad(k, format!("must be non-negative, got {v}")));
        }
        Ok(v)
    }

    fn pos(&self, k: &str) -> Result<f64> {
        let v = self.get(k)?;
        if v <= 0.0 {
            return Err(bad(k, format!("must be positive, got {v}")));
        }
        Ok(v)
    }
}

pub fn evaluate_model(model: Model, params: &Params) -> Result<f64> {
    for k in params.keys() {
        if !model.params().contains(&k.as_str()) {
            return Err(bad(k, format!("not a parameter of {model}")));
        }
    }
    let a = Args { p: params };
    Ok(match model {
        Model::HonestQuorumProb => {
            let (nh, n, k) = (a.nonneg("n_h")?, a.pos("N")?, a.nonneg("k")?);
            if nh > n {
                return Err(bad("n_h", "exceeds N"));
            }
            1.0 - (nh / n).powf(k)
        }
        Model::ShardedThroughput => a.nonneg("n_s")? * a.nonneg("t_s")?,
        Model::BlockThroughputPaper => a.nonneg("B")? * a.nonneg("t_avg")? / a.pos("t_block")?,
        Model::BlockThroughputConsistent => a.nonneg("B")? / (a.pos("t_avg")? * a.pos("t_block")?),
        Model::MaliciousThroughput => {
            let (t, f, n) = (a.nonneg("T_ideal")?, a.nonneg("f")?, a.pos("N")?);
            if f > n {
                return Err(bad("f", "exceeds N"));
            }
            t * (1.0 - f / n)
        }
        Model::NetLatency => (a.nonneg("T_process")? + a.nonneg("T_comm")?) / a.pos("N_shards")?,
        Model::CommitteeLatency => a.nonneg("N_nodes")? / a.pos("C_range")? + a.nonneg("delta_comm")?,
        Model::AdversaryTakeover => {
            let (f, n, s) = (a.nonneg("f")?, a.nonneg("n")?, a.pos("s")?);
            (f * n / s) * (-n).exp()
        }
        Model::FaultProb => {
            let (m, t) = (a.nonneg("m")?, a.pos("t")?);
            if m > (t - 1.0) / 3.0 {
                return Err(bad("m", format!("must be at most (t-1)/3 = {}", (t - 1.0) / 3.0)));
            }
            m / t
        }
        Model::LockOverhead => a.nonneg("T_cross")? * a.nonneg("L_account")? / a.pos("T_intra")?,
        Model::DoSProb => {
            let (ta, th) = (a.nonneg("T_attack")?, a.pos("T_threshold")?);
            let (m, n) = (a.nonneg("M_malicious")?, a.pos("N")?);
            if m > n {
                return Err(bad("M_malicious", "exceeds N"));
            }
            (1.0 - (-ta / th).exp()) * m / n
        }
    })
}

/// Convenience for literal parameter lists.
pub fn eval(model: Model, params: &[(&str, f64)]) -> Result<f64> {
    evaluate_model(model, &params.iter().map(|(k, v)| (k.to_string(), *v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in Model::ALL {
            assert_eq!(m.name().parse::<Model>().unwrap(), m);
        }
        assert!("Nope".parse::<Model>().is_err());
    }

    #[test]
    fn parses_params() {
        let p = parse_params("n_h=70, N=100,k=3").unwrap();
        assert_eq!(p["N"], 100.0);
        assert!(parse_params("x").is_err());
        assert!(parse_params("x=abc").is_err());
    }

    #[test]
    fn domain_errors_name_the_parameter() {
        let e = eval(Model::MaliciousThroughput, &[("T_ideal", 1.0), ("f", 1.0), ("N", 0.0)]).unwrap_err();
        assert!(matches!(e, Error::ModelDomain { ref param, .. } if param == "N"));
        let e = eval(Model::FaultProb, &[("m", 4.0), ("t", 10.0)]).unwrap_err();
        assert!(matches!(e, Error::ModelDomain { ref param, .. } if param == "m"));
        let e = eval(Model::ShardedThroughput, &[("n_s", 1.0)]).unwrap_err();
        assert!(matches!(e, Error::ModelDomain { ref param, .. } if param == "t_s"));
        let e = eval(Model::ShardedThroughput, &[("n_s", 1.0), ("t_s", 1.0), ("zz", 1.0)]).unwrap_err();
        assert!(matches!(e, Error::ModelDomain { ref param, .. } if param == "zz"));
    }

    #[test]
    fn pure() {
        let p = [("B", 1e6), ("t_avg", 250.0), ("t_block", 2.0)];
        assert_eq!(eval(Model::BlockThroughputConsistent, &p).unwrap(), 2000.0);
        assert_eq!(eval(Model::BlockThroughputPaper, &p).unwrap(), 1.25e8);
        assert_eq!(
            eval(Model::BlockThroughputPaper, &p).unwrap(),
            eval(Model::BlockThroughputPaper, &p).unwrap()
        );
    }
}
