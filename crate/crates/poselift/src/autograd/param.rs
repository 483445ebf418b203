//! Named trainable parameter collections and their on-disk text format.
//!
//! The format is versioned structured text: a header line, then one
//! `param <name> <rows> <cols>` line per array followed by `rows` lines
//! of decimal numbers. Values are written with 17 significant digits so
//! a save/load round trip is bit-faithful for finite `f64`.

use std::io::{BufRead, Write};

use indexmap::IndexMap;
use ndarray::Array2;

use super::{AutogradError, Graph, Result, Var};

const FORMAT_HEADER: &str = "poselift-params v1";

/// Named map of trainable arrays. Iteration order is insertion order and
/// therefore stable across runs given an identical insertion sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        debug_assert!(
            !name.contains(char::is_whitespace),
            "parameter names must not contain whitespace"
        );
        if self.entries.contains_key(name) {
            return Err(AutogradError::DuplicateParam {
                name: name.to_string(),
            });
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.entries
            .get(name)
            .ok_or_else(|| AutogradError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| AutogradError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Insert every parameter as a graph leaf, in iteration order.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut vars = IndexMap::new();
        for (name, value) in &self.entries {
            vars.insert(name.clone(), g.leaf(value.clone()));
        }
        BoundParams { vars }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{FORMAT_HEADER}")?;
        write_arrays(w, self.entries.iter().map(|(k, v)| (k.as_str(), v)))?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| AutogradError::Parse {
            line: 1,
            message: "empty parameter file".into(),
        })?;
        let header = header?;
        if header.trim() != FORMAT_HEADER {
            return Err(AutogradError::Parse {
                line: 1,
                message: format!("expected '{FORMAT_HEADER}', got '{header}'"),
            });
        }
        let mut set = ParamSet::new();
        let mut iter = lines.map(|(i, l)| (i, l));
        while let Some((i, line)) = iter.next() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (name, arr) = parse_param_header_and_rows(&line, i + 1, &mut iter)?;
            set.insert(&name, arr)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// Format a float with enough digits to round-trip exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write `param` blocks for a sequence of named arrays.
pub fn write_arrays<'a, W: Write>(
    w: &mut W,
    arrays: impl Iterator<Item = (&'a str, &'a Array2<f64>)>,
) -> Result<()> {
    for (name, value) in arrays {
        writeln!(w, "param {name} {} {}", value.nrows(), value.ncols())?;
        for row in value.rows() {
            let mut line = String::new();
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                line.push_str(&format_f64(*v));
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// Parse one `param <name> <rows> <cols>` header plus its data rows.
/// `line_no` is 1-based for error reporting.
pub fn parse_param_header_and_rows(
    header: &str,
    line_no: usize,
    rest: &mut impl Iterator<Item = (usize, std::io::Result<String>)>,
) -> Result<(String, Array2<f64>)> {
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "param" {
        return Err(AutogradError::Parse {
            line: line_no,
            message: format!("expected 'param <name> <rows> <cols>', got '{header}'"),
        });
    }
    let name = parts[1].to_string();
    let rows: usize = parts[2].parse().map_err(|_| AutogradError::Parse {
        line: line_no,
        message: "bad row count".into(),
    })?;
    let cols: usize = parts[3].parse().map_err(|_| AutogradError::Parse {
        line: line_no,
        message: "bad column count".into(),
    })?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let (i, line) = rest.next().ok_or_else(|| AutogradError::Parse {
            line: line_no,
            message: format!("unexpected end of file inside '{name}'"),
        })?;
        let line = line?;
        let mut count = 0;
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| AutogradError::Parse {
                line: i + 1,
                message: format!("bad number '{tok}' in '{name}'"),
            })?;
            data.push(v);
            count += 1;
        }
        if count != cols {
            return Err(AutogradError::Parse {
                line: i + 1,
                message: format!("expected {cols} values in a row of '{name}', got {count}"),
            });
        }
    }
    let arr = Array2::from_shape_vec((rows, cols), data).expect("row/col counts enforced");
    Ok((name, arr))
}

/// Graph leaves for every parameter of a [`ParamSet`].
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutogradError::UnknownParam {
                name: name.to_string(),
            })
    }

    /// Accumulated gradients for every bound parameter, in iteration
    /// order. Parameters untouched by backward report zeros.
    pub fn grads(&self, g: &Graph) -> IndexMap<String, Array2<f64>> {
        self.vars
            .iter()
            .map(|(name, var)| (name.clone(), g.grad(*var)))
            .collect()
    }
}
