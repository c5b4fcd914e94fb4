//! STAR metadata: a small tokenizer for `data_` / `loop_` blocks and the
//! relion-style CTF columns.
//!
//! Recognized labels (matched case-insensitively, `_rln` prefix optional):
//! `DefocusU` (mandatory), `DefocusV`, `DefocusAngle`, `Voltage`,
//! `SphericalAberration`, `AmplitudeContrast`, `PhaseShift`, `OpticsGroup`.
//! Values missing from the particle loop are looked up in a matching
//! `data_optics` row, then in block-level `_label value` pairs, then fall back
//! to 300 kV, 2.7 mm, 0.1, 0 degrees, with `DefocusV = DefocusU` and angle 0.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::FormatError;

/// Microscope parameters for one particle image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtfParams {
    /// kV
    pub voltage: f64,
    /// mm
    pub spherical_aberration: f64,
    pub amplitude_contrast: f64,
    /// Å
    pub defocus_u: f64,
    /// Å
    pub defocus_v: f64,
    /// degrees
    pub astigmatism_angle: f64,
    /// degrees
    pub phase_shift: f64,
}

impl CtfParams {
    pub const DEFAULT_VOLTAGE: f64 = 300.0;
    pub const DEFAULT_CS: f64 = 2.7;
    pub const DEFAULT_AMPLITUDE_CONTRAST: f64 = 0.1;

    pub fn new(defocus_u: f64, defocus_v: f64, astigmatism_angle: f64) -> Self {
        Self {
            voltage: Self::DEFAULT_VOLTAGE,
            spherical_aberration: Self::DEFAULT_CS,
            amplitude_contrast: Self::DEFAULT_AMPLITUDE_CONTRAST,
            defocus_u,
            defocus_v,
            astigmatism_angle,
            phase_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if !(self.defocus_u > 0.0 && self.defocus_v > 0.0) {
            return Err(FormatError::Invalid(format!(
                "defocus must be positive, got U={} V={}",
                self.defocus_u, self.defocus_v
            )));
        }
        if !(0.0..1.0).contains(&self.amplitude_contrast) {
            return Err(FormatError::Invalid(format!(
                "amplitude contrast {} outside [0, 1)",
                self.amplitude_contrast
            )));
        }
        if !(self.voltage > 0.0) {
            return Err(FormatError::Invalid(format!("voltage {} must be positive", self.voltage)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StarLoop {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Source line of the first token of each row.
    pub row_lines: Vec<usize>,
}

impl StarLoop {
    pub fn column(&self, label: &str) -> Option<usize> {
        let want = normalize_label(label);
        self.columns.iter().position(|c| normalize_label(c) == want)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StarBlock {
    pub name: String,
    pub pairs: Vec<(String, String)>,
    pub loops: Vec<StarLoop>,
}

impl StarBlock {
    pub fn value(&self, label: &str) -> Option<&str> {
        let want = normalize_label(label);
        self.pairs.iter().find(|(k, _)| normalize_label(k) == want).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StarFile {
    pub blocks: Vec<StarBlock>,
}

fn normalize_label(label: &str) -> String {
    let l = label.trim_start_matches('_').to_ascii_lowercase();
    l.strip_prefix("rln").map(str::to_string).unwrap_or(l)
}

#[derive(Debug)]
struct Token {
    text: String,
    line: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, FormatError> {
    let mut tokens = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let mut chars = raw.char_indices().peekable();
        while let Some(&(start, ch)) = chars.peek() {
            if ch.is_whitespace() {
                chars.next();
                continue;
            }
            if ch == '#' {
                break;
            }
            if ch == '\'' || ch == '"' {
                chars.next();
                let mut value = String::new();
                let mut closed = false;
                while let Some((_, c)) = chars.next() {
                    // a quote only closes when followed by whitespace or end of line
                    if c == ch && chars.peek().map_or(true, |&(_, n)| n.is_whitespace()) {
                        closed = true;
                        break;
                    }
                    value.push(c);
                }
                if !closed {
                    return Err(FormatError::Star { line, reason: "unterminated quoted value".into() });
                }
                tokens.push(Token { text: value, line });
                continue;
            }
            let mut end = raw.len();
            while let Some(&(i, c)) = chars.peek() {
                if c.is_whitespace() {
                    end = i;
                    break;
                }
                chars.next();
            }
            tokens.push(Token { text: raw[start..end].to_string(), line });
        }
    }
    Ok(tokens)
}

/// Parse STAR text into blocks of key/value pairs and loops.
pub fn parse_star(text: &str) -> Result<StarFile, FormatError> {
    let tokens = tokenize(text)?;
    let mut file = StarFile::default();
    let mut i = 0;
    let is_keyword = |t: &str| {
        let l = t.to_ascii_lowercase();
        l.starts_with("data_") || l == "loop_" || t.starts_with('_')
    };
    while i < tokens.len() {
        let tok = &tokens[i];
        let lower = tok.text.to_ascii_lowercase();
        if lower.starts_with("data_") {
            file.blocks.push(StarBlock { name: tok.text[5..].to_string(), ..Default::default() });
            i += 1;
            continue;
        }
        let Some(block) = file.blocks.last_mut() else {
            return Err(FormatError::Star { line: tok.line, reason: format!("'{}' before any data_ block", tok.text) });
        };
        if lower == "loop_" {
            let mut lp = StarLoop::default();
            i += 1;
            while i < tokens.len() && tokens[i].text.starts_with('_') {
                lp.columns.push(tokens[i].text.clone());
                i += 1;
            }
            if lp.columns.is_empty() {
                return Err(FormatError::Star { line: tok.line, reason: "loop_ without column labels".into() });
            }
            let mut row = Vec::with_capacity(lp.columns.len());
            let mut row_line = 0;
            while i < tokens.len() && !is_keyword(&tokens[i].text) {
                if row.is_empty() {
                    row_line = tokens[i].line;
                }
                row.push(tokens[i].text.clone());
                if row.len() == lp.columns.len() {
                    lp.rows.push(std::mem::take(&mut row));
                    lp.row_lines.push(row_line);
                }
                i += 1;
            }
            if !row.is_empty() {
                return Err(FormatError::Star {
                    line: row_line,
                    reason: format!("loop row has {} values, expected {}", row.len(), lp.columns.len()),
                });
            }
            block.loops.push(lp);
        } else if tok.text.starts_with('_') {
            let Some(value) = tokens.get(i + 1).filter(|t| !is_keyword(&t.text)) else {
                return Err(FormatError::Star { line: tok.line, reason: format!("label {} has no value", tok.text) });
            };
            block.pairs.push((tok.text.clone(), value.text.clone()));
            i += 2;
        } else {
            return Err(FormatError::Star { line: tok.line, reason: format!("unexpected value '{}'", tok.text) });
        }
    }
    Ok(file)
}

fn parse_num(text: &str, line: usize, label: &str) -> Result<f64, FormatError> {
    text.parse::<f64>()
        .map_err(|_| FormatError::Star { line, reason: format!("column {label}: '{text}' is not a number") })
}

const OPTICS_FIELDS: [&str; 4] = ["Voltage", "SphericalAberration", "AmplitudeContrast", "PhaseShift"];

/// Extract per-particle CTF parameters, in file order, from parsed STAR data.
pub fn ctf_from_star(file: &StarFile) -> Result<Vec<CtfParams>, FormatError> {
    let (block, particles) = file
        .blocks
        .iter()
        .flat_map(|b| b.loops.iter().map(move |l| (b, l)))
        .find(|(_, l)| l.column("DefocusU").is_some())
        .ok_or_else(|| FormatError::MissingColumn { column: "_rlnDefocusU".into() })?;

    // optics-group table: group id -> field -> value
    let mut optics: HashMap<String, HashMap<&str, f64>> = HashMap::new();
    for lp in file.blocks.iter().flat_map(|b| &b.loops) {
        let (Some(g), true) = (lp.column("OpticsGroup"), lp.column("DefocusU").is_none()) else { continue };
        for (row, &line) in lp.rows.iter().zip(&lp.row_lines) {
            let entry = optics.entry(row[g].clone()).or_default();
            for field in OPTICS_FIELDS {
                if let Some(c) = lp.column(field) {
                    entry.insert(field, parse_num(&row[c], line, field)?);
                }
            }
        }
    }
    let scalar = |field: &str| -> Result<Option<f64>, FormatError> {
        for b in std::iter::once(block).chain(file.blocks.iter()) {
            if let Some(v) = b.value(field) {
                return parse_num(v, 0, field).map(Some);
            }
        }
        Ok(None)
    };
    let defaults: HashMap<&str, f64> = [
        ("Voltage", CtfParams::DEFAULT_VOLTAGE),
        ("SphericalAberration", CtfParams::DEFAULT_CS),
        ("AmplitudeContrast", CtfParams::DEFAULT_AMPLITUDE_CONTRAST),
        ("PhaseShift", 0.0),
    ]
    .into_iter()
    .collect();
    let mut fallback: HashMap<&str, f64> = HashMap::new();
    for field in OPTICS_FIELDS {
        fallback.insert(field, scalar(field)?.unwrap_or(defaults[field]));
    }

    let col_u = particles.column("DefocusU").unwrap();
    let col_v = particles.column("DefocusV");
    let col_angle = particles.column("DefocusAngle");
    let col_group = particles.column("OpticsGroup");
    let mut out = Vec::with_capacity(particles.rows.len());
    for (row, &line) in particles.rows.iter().zip(&particles.row_lines) {
        let group = col_group.and_then(|g| optics.get(&row[g]));
        let field = |name: &'static str| -> Result<f64, FormatError> {
            if let Some(c) = particles.column(name) {
                return parse_num(&row[c], line, name);
            }
            Ok(group.and_then(|g| g.get(name).copied()).unwrap_or(fallback[name]))
        };
        let defocus_u = parse_num(&row[col_u], line, "DefocusU")?;
        let params = CtfParams {
            voltage: field("Voltage")?,
            spherical_aberration: field("SphericalAberration")?,
            amplitude_contrast: field("AmplitudeContrast")?,
            defocus_u,
            defocus_v: col_v.map(|c| parse_num(&row[c], line, "DefocusV")).transpose()?.unwrap_or(defocus_u),
            astigmatism_angle: col_angle.map(|c| parse_num(&row[c], line, "DefocusAngle")).transpose()?.unwrap_or(0.0),
            phase_shift: field("PhaseShift")?,
        };
        params.validate().map_err(|e| FormatError::Star { line, reason: e.to_string() })?;
        out.push(params);
    }
    Ok(out)
}

/// Read a STAR file and return one [`CtfParams`] per particle row.
pub fn read_star_ctf(path: impl AsRef<Path>) -> Result<Vec<CtfParams>, FormatError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })?;
    ctf_from_star(&parse_star(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row_without_astigmatism() {
        let text = "data_\nloop_\n_rlnDefocusU #1\n_rlnDefocusV #2\n_rlnDefocusAngle #3\n10000 10000 0\n";
        let ctf = ctf_from_star(&parse_star(text).unwrap()).unwrap();
        assert_eq!(ctf.len(), 1);
        assert_eq!(ctf[0].defocus_u, 10000.0);
        assert_eq!(ctf[0].defocus_v, ctf[0].defocus_u);
        assert_eq!(ctf[0].astigmatism_angle, 0.0);
        assert_eq!(ctf[0].voltage, 300.0);
    }

    #[test]
    fn missing_defocus_column_is_an_error() {
        let text = "data_\nloop_\n_rlnVoltage\n300\n";
        assert!(matches!(ctf_from_star(&parse_star(text).unwrap()), Err(FormatError::MissingColumn { .. })));
    }

    #[test]
    fn ragged_loop_is_malformed() {
        let text = "data_\nloop_\n_a\n_b\n1 2\n3\n";
        match parse_star(text) {
            Err(FormatError::Star { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quoted_values_keep_spaces() {
        let file = parse_star("data_x\n_name 'a b'\nloop_\n_c\n\"it's\"\n").unwrap();
        assert_eq!(file.blocks[0].value("name"), Some("a b"));
        assert_eq!(file.blocks[0].loops[0].rows[0][0], "it's");
    }

    #[test]
    fn invalid_amplitude_contrast_rejected() {
        let text = "data_\nloop_\n_rlnDefocusU\n_rlnAmplitudeContrast\n10000 1.5\n";
        assert!(ctf_from_star(&parse_star(text).unwrap()).is_err());
    }
}
