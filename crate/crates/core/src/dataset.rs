//! Encoded state-action datasets collected from a decomposed black-box policy.

use std::fs;
use std::path::Path;

use crate::envlab::{Environment, Step};
use crate::error::{ensure_len, Error, Result};
use crate::numkit::{derive_seed, Matrix};
use crate::textfmt::{check_name, join_floats, join_list, parse_floats, parse_list, parse_token, Header};

const DATASET_KIND: &str = "protoscope-dataset";
const DATASET_VERSION: u32 = 1;

/// Maps positions of the policy's raw action output onto flat class positions.
///
/// `order[i]` is the flat index of raw position `i`. `signed[c]` marks flat
/// positions whose sign carries meaning (used by the canonical baseline).
#[derive(Clone, Debug, PartialEq)]
pub struct ActionLayout {
    order: Vec<usize>,
    class_names: Vec<String>,
    signed: Vec<bool>,
}

impl ActionLayout {
    pub fn new(order: Vec<usize>, class_names: Vec<String>, signed: Vec<bool>) -> Result<Self> {
        let a = order.len();
        ensure_len("layout class names", class_names.len(), a)?;
        ensure_len("layout signed flags", signed.len(), a)?;
        let mut seen = vec![false; a];
        for &o in &order {
            if o >= a || std::mem::replace(&mut seen[o], true) {
                return Err(Error::Config(format!("action layout {order:?} is not a permutation")));
            }
        }
        for name in &class_names {
            check_name(name)?;
        }
        Ok(Self {
            order,
            class_names,
            signed,
        })
    }

    pub fn identity(names: &[&str], signed: &[bool]) -> Result<Self> {
        Self::new(
            (0..names.len()).collect(),
            names.iter().map(|s| s.to_string()).collect(),
            signed.to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn signed(&self) -> &[bool] {
        &self.signed
    }

    /// Reorder a raw action vector into flat class positions.
    pub fn flatten(&self, raw: &[f64]) -> Result<Vec<f64>> {
        ensure_len("raw action", raw.len(), self.len())?;
        let mut flat = vec![0.0; raw.len()];
        for (i, &o) in self.order.iter().enumerate() {
            flat[o] = raw[i];
        }
        Ok(flat)
    }
}

/// Dominant-component class of a continuous action.
///
/// The class is the argmax of `sigmoid(|a_i|)` over the flattened action;
/// sigmoid is strictly increasing, so this compares `|a_i|` directly, which
/// also avoids spurious ties where the sigmoid saturates. Lowest index wins ties.
pub fn discretize_action(raw: &[f64], layout: &ActionLayout) -> Result<usize> {
    let flat = layout.flatten(raw)?;
    if flat.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical(format!("NaN in action vector {raw:?}")));
    }
    let mut best = 0;
    for (i, v) in flat.iter().enumerate() {
        if v.abs() > flat[best].abs() {
            best = i;
        }
    }
    Ok(best)
}

/// Label for a policy output: logit argmax for discrete spaces, [`discretize_action`] otherwise.
pub fn label_for(raw: &[f64], layout: &ActionLayout, discrete: bool) -> Result<usize> {
    if !discrete {
        return discretize_action(raw, layout);
    }
    let flat = layout.flatten(raw)?;
    if flat.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical(format!("NaN in action logits {raw:?}")));
    }
    Ok(crate::numkit::argmax(&flat).expect("layout is non-empty"))
}

/// A policy written as `π(s) = W·f_enc(s) + b`.
pub trait PolicyDecomposition {
    fn encode(&self, state: &[f64]) -> Result<Vec<f64>>;
    fn final_weight(&self) -> &Matrix;
    fn final_bias(&self) -> &[f64];

    fn latent_dim(&self) -> usize {
        self.final_weight().cols()
    }

    fn action_dim(&self) -> usize {
        self.final_weight().rows()
    }

    /// Final linear layer applied to an encoded state.
    fn head(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.final_weight().matvec(z)?;
        out.iter_mut().zip(self.final_bias()).for_each(|(o, b)| *o += b);
        Ok(out)
    }

    fn action_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.head(&self.encode(state)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub z: Vec<f64>,
    pub raw_action: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub d_z: usize,
    pub layout: ActionLayout,
    pub discrete: bool,
    pub env_name: String,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn action_dim(&self) -> usize {
        self.layout.len()
    }

    pub fn classes(&self) -> usize {
        self.layout.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub meta: DatasetMeta,
    pub rows: Vec<Row>,
}

impl EncodedDataset {
    pub fn new(meta: DatasetMeta, rows: Vec<Row>) -> Result<Self> {
        check_name(&meta.env_name)?;
        let ds = Self { meta, rows };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_z, a, c) = (self.meta.d_z, self.meta.action_dim(), self.meta.classes());
        for (i, r) in self.rows.iter().enumerate() {
            if r.z.len() != d_z || r.raw_action.len() != a {
                return Err(Error::Shape(format!(
                    "row {i}: expected z of length {d_z} and action of length {a}"
                )));
            }
            if r.label >= c {
                return Err(Error::Shape(format!("row {i}: label {} >= {c} classes", r.label)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.meta.classes()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for r in &self.rows {
            counts[r.label] += 1;
        }
        counts
    }

    /// Dataset indices of the rows labelled `class`, ascending.
    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].label == class).collect()
    }

    /// Subset with the given row indices, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            meta: self.meta.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut h = Header::new(DATASET_KIND);
        h.push("version", DATASET_VERSION)
            .push("d_z", m.d_z)
            .push("a", m.action_dim())
            .push("c", m.classes())
            .push("discrete", u8::from(m.discrete))
            .push("env", &m.env_name)
            .push("seed", m.seed)
            .push("layout", join_list(m.layout.order()))
            .push("classes", join_list(m.layout.class_names()))
            .push("signed", join_list(&m.layout.signed().iter().map(|&s| u8::from(s)).collect::<Vec<_>>()))
            .push("rows", self.rows.len());
        let mut out = h.render();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.label.to_string());
            out.push(' ');
            out.push_str(&join_floats(&r.raw_action));
            out.push(' ');
            out.push_str(&join_floats(&r.z));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = Header::parse_line(
            lines.next().ok_or_else(|| Error::format(1, "empty file"))?,
            DATASET_KIND,
        )?;
        let version: u32 = header.parse("version")?;
        if version != DATASET_VERSION {
            return Err(Error::format(1, format!("unsupported dataset version {version}")));
        }
        let d_z: usize = header.parse("d_z")?;
        let a: usize = header.parse("a")?;
        let c: usize = header.parse("c")?;
        let order: Vec<usize> = parse_list(header.get("layout")?, "layout")?;
        let names: Vec<String> = parse_list(header.get("classes")?, "classes")?;
        let signed: Vec<u8> = parse_list(header.get("signed")?, "signed")?;
        let layout = ActionLayout::new(order, names, signed.iter().map(|&s| s != 0).collect())
            .map_err(|e| Error::format(1, e.to_string()))?;
        if layout.len() != a || a != c {
            return Err(Error::format(1, format!("inconsistent a={a}, c={c}, layout length {}", layout.len())));
        }
        let meta = DatasetMeta {
            d_z,
            layout,
            discrete: header.parse::<u8>("discrete")? != 0,
            env_name: header.get("env")?.to_string(),
            seed: header.parse("seed")?,
        };
        let expected_rows: usize = header.parse("rows")?;
        let mut rows = Vec::with_capacity(expected_rows);
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let mut tokens = line.split(' ');
            let label: usize = parse_token(tokens.next(), lineno, "label")?;
            let values = parse_floats(tokens, lineno)?;
            if values.len() != a + d_z {
                return Err(Error::format(
                    lineno,
                    format!("expected {} values, found {}", a + d_z, values.len()),
                ));
            }
            if label >= c {
                return Err(Error::format(lineno, format!("label {label} out of range")));
            }
            rows.push(Row {
                raw_action: values[..a].to_vec(),
                z: values[a..].to_vec(),
                label,
            });
        }
        if !text.ends_with('\n') {
            return Err(Error::format(rows.len() + 1, "file does not end with a newline (truncated?)"));
        }
        if rows.len() != expected_rows {
            return Err(Error::format(
                rows.len() + 2,
                format!("expected {expected_rows} rows, found {}", rows.len()),
            ));
        }
        Ok(Self { meta, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Run `policy` greedily in `env` for `n_steps` steps, recording encoded states
/// and raw policy outputs. Episodes restart with seeds derived from `seed`.
pub fn collect_rollout<P, E>(policy: &P, env: &mut E, n_steps: usize, seed: u64) -> Result<EncodedDataset>
where
    P: PolicyDecomposition + ?Sized,
    E: Environment + ?Sized,
{
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be >= 1".into()));
    }
    let space = env.action_space();
    if policy.action_dim() != space.dim() {
        return Err(Error::Shape(format!(
            "policy emits {} actions, env `{}` expects {}",
            policy.action_dim(),
            env.name(),
            space.dim()
        )));
    }
    let mut episode = 0u64;
    let mut state = env.reset(derive_seed(seed, episode));
    if state.len() != env.state_dim() {
        return Err(Error::Shape("env reset returned wrong state dimension".into()));
    }
    let mut rows = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let z = policy.encode(&state)?;
        let raw = policy.head(&z)?;
        let label = label_for(&raw, &space.layout, space.discrete)?;
        let action = space.greedy(&raw)?;
        rows.push(Row { z, raw_action: raw, label });
        let Step { state: next, done, .. } = env.step(&action)?;
        state = if done {
            episode += 1;
            env.reset(derive_seed(seed, episode))
        } else {
            next
        };
    }
    EncodedDataset::new(
        DatasetMeta {
            d_z: policy.latent_dim(),
            layout: space.layout,
            discrete: space.discrete,
            env_name: env.name().to_string(),
            seed,
        },
        rows,
    )
}
