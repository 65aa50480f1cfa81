//! Plain-text network checkpoints.
//!
//! ```text
//! HJBADP-CKPT-1
//! seed 42
//! network actor
//! layers 2
//! layer 5 32 elu
//! layer 32 1 scaled_tanh:0.35
//! params 225
//! <one value per line: layer 0 weights (row-major), layer 0 biases, layer 1 ...>
//! end
//! network critic
//! ...
//! vector input_shift 5
//! <one value per line>
//! end
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a write/read cycle is
//! bit-exact.

use std::io::{BufRead, Write};

use super::activation::Activation;
use super::mlp::{LayerSpec, MlpParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "HJBADP-CKPT-1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub networks: Vec<(String, MlpParams)>,
    /// Named auxiliary vectors such as input normalization constants.
    pub vectors: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Option<&MlpParams> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn vector(&self, name: &str) -> Option<&[f64]> {
        self.vectors.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(Error::Checkpoint(format!("invalid block name `{name}`")));
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    seed: u64,
    networks: &[(&str, &MlpParams)],
    vectors: &[(&str, &[f64])],
) -> Result<()> {
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    writeln!(w, "seed {seed}")?;
    for (name, params) in networks {
        check_name(name)?;
        writeln!(w, "network {name}")?;
        writeln!(w, "layers {}", params.num_layers())?;
        for s in params.specs() {
            writeln!(w, "layer {} {} {}", s.input_width, s.output_width, s.activation)?;
        }
        writeln!(w, "params {}", params.num_params())?;
        for v in params.as_flat() {
            writeln!(w, "{v:e}")?;
        }
        writeln!(w, "end")?;
    }
    for (name, values) in vectors {
        check_name(name)?;
        writeln!(w, "vector {name} {}", values.len())?;
        for v in *values {
            writeln!(w, "{v:e}")?;
        }
        writeln!(w, "end")?;
    }
    w.flush()?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<Option<String>> {
        for line in self.inner.by_ref() {
            self.line_no += 1;
            let line = line?;
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                return Ok(Some(trimmed.to_owned()));
            }
        }
        Ok(None)
    }

    fn expect(&mut self) -> Result<String> {
        self.next_line()?
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file after line {}", self.line_no)))
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let line = self.expect()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(|v| v.trim().to_owned())
            .ok_or_else(|| self.err(format!("expected `{key} ...`, found `{line}`")))
    }

    fn err(&self, msg: String) -> Error {
        Error::Checkpoint(format!("line {}: {msg}", self.line_no))
    }
}

fn parse<T: std::str::FromStr>(lines: &Lines<impl BufRead>, s: &str, what: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| lines.err(format!("cannot parse {what} from `{s}`")))
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Checkpoint> {
    let mut lines = Lines {
        inner: r.lines(),
        line_no: 0,
    };
    let header = lines.expect()?;
    if header != CHECKPOINT_HEADER {
        return Err(lines.err(format!("bad header `{header}`, expected `{CHECKPOINT_HEADER}`")));
    }
    let seed_s = lines.keyed("seed")?;
    let seed: u64 = parse(&lines, &seed_s, "seed")?;
    let mut networks = Vec::new();
    let mut vectors = Vec::new();
    while let Some(line) = lines.next_line()? {
        if let Some(rest) = line.strip_prefix("vector ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(lines.err(format!("malformed vector line `{line}`")));
            }
            let count: usize = parse(&lines, parts[1], "vector length")?;
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                let v = lines.expect()?;
                values.push(parse::<f64>(&lines, &v, "vector entry")?);
            }
            let end = lines.expect()?;
            if end != "end" {
                return Err(lines.err(format!("expected `end`, found `{end}`")));
            }
            vectors.push((parts[0].to_owned(), values));
            continue;
        }
        let name = line
            .strip_prefix("network ")
            .ok_or_else(|| lines.err(format!("expected `network <name>`, found `{line}`")))?
            .trim()
            .to_owned();
        let n_s = lines.keyed("layers")?;
        let n_layers: usize = parse(&lines, &n_s, "layer count")?;
        let mut specs = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let l = lines.keyed("layer")?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(lines.err(format!("malformed layer line `{l}`")));
            }
            let act: Activation = parts[2]
                .parse()
                .map_err(|_| lines.err(format!("unknown activation `{}`", parts[2])))?;
            specs.push(LayerSpec::new(
                parse(&lines, parts[0], "input width")?,
                parse(&lines, parts[1], "output width")?,
                act,
            ));
        }
        let c_s = lines.keyed("params")?;
        let count: usize = parse(&lines, &c_s, "parameter count")?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let v = lines.expect()?;
            data.push(parse::<f64>(&lines, &v, "parameter")?);
        }
        let end = lines.expect()?;
        if end != "end" {
            return Err(lines.err(format!("expected `end`, found `{end}`")));
        }
        let params = MlpParams::from_flat(&specs, data, seed)
            .map_err(|e| Error::Checkpoint(format!("network `{name}`: {e}")))?;
        networks.push((name, params));
    }
    Ok(Checkpoint {
        seed,
        networks,
        vectors,
    })
}
