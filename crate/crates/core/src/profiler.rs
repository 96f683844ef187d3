//! Analytic parameter, multiply-accumulate and activation accounting.
//!
//! The walk below follows the architecture from the config alone and never
//! builds tensors, so it doubles as an independent check of model
//! construction. Headline MACs cover convolutions, linear maps and the two
//! attention matmuls; normalization, activation, softmax and pooling costs go
//! to a separate elementwise column (one operation per element).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{EffLocModel, ModelConfig};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProfileRow {
    pub module: String,
    pub params: u64,
    pub macs: u64,
    /// Normalization / activation / softmax element operations.
    pub elementwise: u64,
    /// Output elements per sample.
    pub activations: u64,
}

impl ProfileRow {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub config: ModelConfig,
    pub resolution: usize,
    pub include_regressor: bool,
    pub rows: Vec<ProfileRow>,
    pub totals: ProfileRow,
}

/// Cost of a convolution producing an `out_hw` × `out_hw` map.
pub fn conv_cost(cin: usize, cout: usize, k: usize, groups: usize, out_hw: usize, bias: bool) -> (u64, u64) {
    let per_out = (cin / groups * k * k) as u64;
    let params = cout as u64 * per_out + if bias { cout as u64 } else { 0 };
    let macs = cout as u64 * per_out * (out_hw * out_hw) as u64;
    (params, macs)
}

struct Walk {
    rows: Vec<ProfileRow>,
}

impl Walk {
    fn row(&mut self, module: String, params: u64, macs: u64, elementwise: u64, activations: u64) {
        self.rows.push(ProfileRow {
            module,
            params,
            macs,
            elementwise,
            activations,
        });
    }

    fn conv(&mut self, m: String, cin: usize, cout: usize, k: usize, groups: usize, hw: usize, bias: bool) {
        let (p, macs) = conv_cost(cin, cout, k, groups, hw, bias);
        self.row(m, p, macs, 0, (cout * hw * hw) as u64);
    }

    fn norm(&mut self, m: String, c: usize, elems: usize) {
        self.row(m, 2 * c as u64, 0, elems as u64, elems as u64);
    }

    fn act(&mut self, m: String, elems: usize) {
        self.row(m, 0, 0, elems as u64, elems as u64);
    }

    fn linear(&mut self, m: String, din: usize, dout: usize, tokens: usize) {
        let p = (din * dout + dout) as u64;
        self.row(m, p, (din * dout * tokens) as u64, 0, (dout * tokens) as u64);
    }
}

pub fn profile(config: &ModelConfig, resolution: usize, include_regressor: bool) -> Result<ProfileReport> {
    let mut cfg = config.clone();
    cfg.input_resolution = resolution;
    cfg.validate()?;

    let mut w = Walk { rows: Vec::new() };
    let mut cin = 3;
    let mut hw = resolution;
    let stem = cfg.stem_channels();
    for (i, &c) in stem.iter().enumerate() {
        hw /= 2;
        w.conv(format!("stem.{i}.conv"), cin, c, 3, 1, hw, false);
        w.norm(format!("stem.{i}.bn"), c, c * hw * hw);
        if i + 1 < stem.len() {
            w.act(format!("stem.{i}.act"), c * hw * hw);
        }
        cin = c;
    }

    for s in 0..3 {
        let c = cfg.widths[s];
        if s > 0 {
            hw /= 2;
            w.conv(format!("stages.{s}.down.conv"), cfg.widths[s - 1], c, 3, 1, hw, false);
            w.norm(format!("stages.{s}.down.bn"), c, c * hw * hw);
        }
        let t = hw * hw;
        let (n, cs, v, qk) = (cfg.heads[s], cfg.head_split(s), cfg.v_dim(s), cfg.qk_dim[s]);
        let e = cfg.ffn_expansion * c;
        for b in 0..cfg.depths[s] {
            let block = format!("stages.{s}.blocks.{b}");
            for side in ["pre", "post"] {
                if side == "post" {
                    let a = format!("{block}.attn");
                    w.norm(format!("{a}.norm"), c, c * t);
                    for j in 0..n {
                        let h = format!("{a}.heads.{j}");
                        w.linear(format!("{h}.q"), cs, qk, t);
                        w.row(format!("{h}.k"), (cs * qk) as u64, (cs * qk * t) as u64, 0, (qk * t) as u64);
                        w.linear(format!("{h}.v"), cs, v, t);
                        // scores QKᵀ and the weighted sum of values; softmax is elementwise
                        w.row(format!("{h}.attn"), 0, (t * t * qk + t * t * v) as u64, (t * t) as u64, (t * t + t * v) as u64);
                    }
                    if cfg.literal_outer_softmax {
                        w.act(format!("{a}.outer_softmax"), n * v * t);
                    }
                    w.linear(format!("{a}.proj"), n * v, c, t);
                }
                for k in 0..cfg.ffn_count {
                    let p = format!("{block}.{side}.{k}");
                    w.conv(format!("{p}.dw.conv"), c, c, cfg.dw_kernel, c, hw, false);
                    w.norm(format!("{p}.dw.bn"), c, c * t);
                    w.norm(format!("{p}.ffn.bn"), c, c * t);
                    w.conv(format!("{p}.ffn.fc1"), c, e, 1, 1, hw, true);
                    w.act(format!("{p}.ffn.act"), e * t);
                    w.conv(format!("{p}.ffn.fc2"), e, c, 1, 1, hw, true);
                }
            }
        }
    }

    if include_regressor {
        let c = cfg.widths[2];
        w.act("head.pool".into(), c * hw * hw);
        let mut din = c;
        for (i, &h) in cfg.regressor_hidden.iter().enumerate() {
            w.linear(format!("head.fc{i}"), din, h, 1);
            w.act(format!("head.fc{i}.act"), h);
            din = h;
        }
        w.linear("head.out".into(), din, 6, 1);
    }

    let mut totals = ProfileRow {
        module: "total".into(),
        ..Default::default()
    };
    for r in &w.rows {
        totals.params += r.params;
        totals.macs += r.macs;
        totals.elementwise += r.elementwise;
        totals.activations += r.activations;
    }
    Ok(ProfileReport {
        config: cfg,
        resolution,
        include_regressor,
        rows: w.rows,
        totals,
    })
}

fn millions(v: u64) -> String {
    format!("{:.2}M", v as f64 / 1e6)
}

impl ProfileReport {
    /// Parameter counts summed per module path, definition order.
    pub fn params_by_module(&self) -> Vec<(String, u64)> {
        let mut out: Vec<(String, u64)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.params > 0) {
            match out.iter_mut().find(|(m, _)| *m == r.module) {
                Some((_, p)) => *p += r.params,
                None => out.push((r.module.clone(), r.params)),
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,params,macs,flops,activations\n");
        for r in self.rows.iter().chain(std::iter::once(&self.totals)) {
            let _ = writeln!(s, "{},{},{},{},{}", r.module, r.params, r.macs, r.flops(), r.activations);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let headers = ["module", "params", "macs", "flops", "elementwise", "activations"];
        let cells = |r: &ProfileRow| {
            [
                r.module.clone(),
                r.params.to_string(),
                r.macs.to_string(),
                r.flops().to_string(),
                r.elementwise.to_string(),
                r.activations.to_string(),
            ]
        };
        let body: Vec<[String; 6]> = self.rows.iter().chain(std::iter::once(&self.totals)).map(cells).collect();
        let mut width = headers.map(str::len);
        for row in &body {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cols: &[String]| {
            let mut l = format!("{:<w$}", cols[0], w = width[0]);
            for (c, w) in cols[1..].iter().zip(&width[1..]) {
                let _ = write!(l, "  {c:>w$}");
            }
            l.push('\n');
            l
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "config {} at {r}x{r}, regressor {}",
            self.config.name,
            if self.include_regressor { "included" } else { "excluded" },
            r = self.resolution
        );
        out.push_str(&line(&headers.map(String::from)));
        let rule: usize = width.iter().sum::<usize>() + 2 * (width.len() - 1);
        let _ = writeln!(out, "{}", "-".repeat(rule));
        for (i, row) in body.iter().enumerate() {
            if i + 1 == body.len() {
                let _ = writeln!(out, "{}", "-".repeat(rule));
            }
            out.push_str(&line(row));
        }
        let _ = writeln!(
            out,
            "params {}  MACs {}  FLOPs (2xMACs) {}",
            millions(self.totals.params),
            millions(self.totals.macs),
            millions(self.totals.flops())
        );
        out
    }
}

/// Outcome of comparing analytic and stored parameter counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCheck {
    pub analytic_total: u64,
    pub actual_total: u64,
    /// `(module, analytic, actual)` for every module whose counts differ.
    pub diffs: Vec<(String, u64, u64)>,
}

impl ParamCheck {
    pub fn passed(&self) -> bool {
        self.diffs.is_empty() && self.analytic_total == self.actual_total
    }
}

/// Compares a report's per-module parameter counts with a model's stored
/// tensors.
pub fn compare_param_counts<T: Scalar>(report: &ProfileReport, model: &EffLocModel<T>) -> ParamCheck {
    let analytic = report.params_by_module();
    let actual: Vec<(String, u64)> = model
        .params
        .numel_by_module()
        .into_iter()
        .map(|(m, n)| (m, n as u64))
        .collect();
    let mut diffs = Vec::new();
    for (m, a) in &analytic {
        let got = actual.iter().find(|(k, _)| k == m).map_or(0, |(_, n)| *n);
        if got != *a {
            diffs.push((m.clone(), *a, got));
        }
    }
    for (m, n) in &actual {
        if !analytic.iter().any(|(k, _)| k == m) {
            diffs.push((m.clone(), 0, *n));
        }
    }
    ParamCheck {
        analytic_total: analytic.iter().map(|(_, p)| p).sum(),
        actual_total: actual.iter().map(|(_, p)| p).sum(),
        diffs,
    }
}

pub fn verify_param_count<T: Scalar>(model: &EffLocModel<T>) -> Result<ParamCheck> {
    let report = profile(&model.config, model.config.input_resolution, true)?;
    Ok(compare_param_counts(&report, model))
}

/// Published sizes: (config name, parameters, FLOPs as reported).
pub const REFERENCE_FIGURES: [(&str, f64, f64); 3] = [
    ("effloc", 14.99e6, 710.95e6),
    ("effloc-small", 11.32e6, 397.68e6),
    ("effloc-xs", 8.66e6, 227.68e6),
];

/// Relative deviation `(ours − reference) / reference`.
pub fn relative_gap(ours: f64, reference: f64) -> Result<f64> {
    if reference == 0.0 {
        return Err(Error::Contract("reference value is zero".into()));
    }
    Ok(ours / reference - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_conv_case() {
        let (p, m) = conv_cost(1, 1, 1, 1, 1, false);
        assert_eq!((p, m), (1, 1));
        let (p, _) = conv_cost(1, 1, 1, 1, 1, true);
        assert!(p <= 2);
        // depthwise divides by the channel count
        assert_eq!(conv_cost(8, 8, 3, 8, 4, false), (72, 72 * 16));
    }

    #[test]
    fn totals_are_row_sums_and_csv_shape() {
        let r = profile(&ModelConfig::tiny(), 64, true).unwrap();
        assert_eq!(r.totals.params, r.rows.iter().map(|x| x.params).sum::<u64>());
        assert_eq!(r.totals.macs, r.rows.iter().map(|x| x.macs).sum::<u64>());
        let csv = r.to_csv();
        assert!(csv.starts_with("module,params,macs,flops,activations\n"));
        assert_eq!(csv.lines().count(), r.rows.len() + 2);
        let table = r.to_table();
        assert!(table.contains("stages.2.blocks.0.attn.proj"));
    }

    #[test]
    fn regressor_flag() {
        let with = profile(&ModelConfig::effloc(), 256, true).unwrap();
        let without = profile(&ModelConfig::effloc(), 256, false).unwrap();
        assert!(without.rows.iter().all(|r| !r.module.starts_with("head")));
        let head: u64 = with.rows.iter().filter(|r| r.module.starts_with("head")).map(|r| r.params).sum();
        assert_eq!(with.totals.params - without.totals.params, head);
    }

    #[test]
    fn score_cost_quadratic_in_tokens() {
        let cfg = ModelConfig::effloc_small();
        let a = profile(&cfg, 256, true).unwrap();
        let b = profile(&cfg, 512, true).unwrap();
        let row = |r: &ProfileReport| r.rows.iter().find(|x| x.module == "stages.0.blocks.0.attn.heads.0.attn").unwrap().macs;
        // tokens ×4 ⇒ T² ×16
        assert_eq!(row(&b), 16 * row(&a));
    }

    #[test]
    fn invalid_config_is_error() {
        let mut c = ModelConfig::tiny();
        c.heads = [3, 3, 3];
        assert!(matches!(profile(&c, 64, true), Err(Error::Config(_))));
        assert!(profile(&ModelConfig::tiny(), 60, true).is_err());
    }
}
