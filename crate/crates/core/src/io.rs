//! File formats: state JSON, trace CSV and a JSON writer that keeps every
//! float at 17 significant digits so files round-trip bit for bit.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::observables::CyclopsVariant;
use crate::qutrit::{DensityMatrix, Matrix3c};

pub const BASIS_LABEL: &str = "m=-1,0,+1";
pub const TRACE_FORMAT: &str = "alkatomo-trace v1";

/// `Matrix3c` as `[[[re, im]; 3]; 3]`, row major.
pub mod serde_matrix {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3c, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<[f64; 2]>> = (0..3)
            .map(|i| (0..3).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Matrix3c, D::Error> {
        let rows: Vec<Vec<[f64; 2]>> = Vec::deserialize(d)?;
        if rows.len() != 3 || rows.iter().any(|r| r.len() != 3) {
            return Err(D::Error::custom("expected a 3x3 array of [re, im] pairs"));
        }
        Ok(Matrix3c::from_fn(|i, j| {
            Complex64::new(rows[i][j][0], rows[i][j][1])
        }))
    }
}

/// Pretty JSON with floats written as `{:.16e}` (17 significant digits).
struct PreciseFormatter(PrettyFormatter<'static>);

impl PreciseFormatter {
    fn write_float<W: ?Sized + Write>(writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }
}

impl Formatter for PreciseFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        Self::write_float(writer, value)
    }
    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        Self::write_float(writer, f64::from(value))
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes to pretty JSON with full-precision floats.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_string(value)?.as_bytes())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    basis: String,
    #[serde(with = "serde_matrix")]
    rho: Matrix3c,
}

/// `{"basis": "m=-1,0,+1", "rho": [[[re, im]; 3]; 3]}`.
pub fn state_to_json(rho: &DensityMatrix) -> Result<String> {
    to_json_string(&StateFile {
        basis: BASIS_LABEL.into(),
        rho: *rho.matrix(),
    })
}

pub fn state_from_json(text: &str) -> Result<DensityMatrix> {
    let file: StateFile = serde_json::from_str(text)?;
    if file.basis != BASIS_LABEL {
        return Err(Error::InvalidInput(format!(
            "unsupported basis '{}', expected '{BASIS_LABEL}'",
            file.basis
        )));
    }
    DensityMatrix::new(file.rho)
}

pub fn read_state(path: &Path) -> Result<DensityMatrix> {
    state_from_json(&read_to_string(path)?)
}

pub fn write_state(path: &Path, rho: &DensityMatrix) -> Result<()> {
    write_atomic(path, state_to_json(rho)?.as_bytes())
}

/// Header line of a trace file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceHeader {
    pub pulse: String,
    pub variant: Option<CyclopsVariant>,
    pub seed: u64,
}

pub fn variant_tag(v: Option<CyclopsVariant>) -> &'static str {
    v.map_or("none", CyclopsVariant::tag)
}

fn parse_variant(s: &str) -> Option<Option<CyclopsVariant>> {
    match s {
        "none" => Some(None),
        "Y" => Some(Some(CyclopsVariant::Y)),
        "ZY" => Some(Some(CyclopsVariant::ZY)),
        _ => None,
    }
}

pub fn trace_to_csv(header: &TraceHeader, times: &[f64], values: &[f64]) -> String {
    let mut out = String::with_capacity(48 * times.len() + 128);
    out.push_str(&format!(
        "# {TRACE_FORMAT}; pulse={}; variant={}; seed={}\n",
        header.pulse,
        variant_tag(header.variant),
        header.seed
    ));
    out.push_str("time_s,rotation_rad\n");
    for (t, v) in times.iter().zip(values) {
        out.push_str(&format!("{t:.16e},{v:.16e}\n"));
    }
    out
}

/// Parses a trace file; errors name the offending line (1-based).
pub fn trace_from_csv(path: &Path, text: &str) -> Result<(TraceHeader, Vec<f64>, Vec<f64>)> {
    let err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let rest = first
        .strip_prefix("# ")
        .and_then(|s| s.strip_prefix(TRACE_FORMAT))
        .ok_or_else(|| err(1, format!("expected header starting with '# {TRACE_FORMAT}'")))?;
    let (mut pulse, mut variant, mut seed) = (None, None, None);
    for field in rest.split(';').map(str::trim).filter(|f| !f.is_empty()) {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(1, format!("malformed header field '{field}'")))?;
        match key {
            "pulse" => pulse = Some(value.to_string()),
            "variant" => {
                variant = Some(
                    parse_variant(value)
                        .ok_or_else(|| err(1, format!("unknown variant '{value}'")))?,
                )
            }
            "seed" => {
                seed = Some(
                    value
                        .parse::<u64>()
                        .map_err(|e| err(1, format!("bad seed '{value}': {e}")))?,
                )
            }
            _ => return Err(err(1, format!("unknown header field '{key}'"))),
        }
    }
    let header = TraceHeader {
        pulse: pulse.ok_or_else(|| err(1, "header lacks pulse".into()))?,
        variant: variant.ok_or_else(|| err(1, "header lacks variant".into()))?,
        seed: seed.ok_or_else(|| err(1, "header lacks seed".into()))?,
    };
    match lines.next() {
        Some((_, "time_s,rotation_rad")) => {}
        _ => return Err(err(2, "expected column header 'time_s,rotation_rad'".into())),
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| err(lineno, format!("expected two columns, got '{line}'")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(lineno, format!("invalid number '{s}'")))
        };
        times.push(parse(t)?);
        values.push(parse(v)?);
    }
    Ok((header, times, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qutrit::random_state;

    #[test]
    fn state_json_round_trip_is_exact() {
        let rho = random_state(9);
        let text = state_to_json(&rho).unwrap();
        assert!(text.contains("\"basis\": \"m=-1,0,+1\""));
        let back = state_from_json(&text).unwrap();
        assert_eq!(back, rho);
    }

    #[test]
    fn floats_keep_seventeen_digits() {
        let text = to_json_string(&[0.1f64, 1.0 / 3.0]).unwrap();
        assert!(text.contains("1.0000000000000001e-1"));
        assert!(text.contains("3.3333333333333331e-1"));
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, vec![0.1, 1.0 / 3.0]);
    }

    #[test]
    fn state_json_rejects_bad_basis_and_invalid_state() {
        let rho = random_state(1);
        let text = state_to_json(&rho).unwrap().replace("m=-1,0,+1", "m=+1,0,-1");
        assert!(state_from_json(&text).is_err());
        let bad = r#"{"basis":"m=-1,0,+1","rho":[[[1.1,0],[0,0],[0,0]],[[0,0],[0,0],[0,0]],[[0,0],[0,0],[-0.1,0]]]}"#;
        assert!(matches!(state_from_json(bad), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn trace_csv_round_trip() {
        let header = TraceHeader {
            pulse: "x90".into(),
            variant: Some(CyclopsVariant::ZY),
            seed: 17,
        };
        let times = vec![0.0, 0.1, 0.2];
        let values = vec![1.0 / 3.0, -2e-7, std::f64::consts::PI];
        let text = trace_to_csv(&header, &times, &values);
        assert!(text.starts_with("# alkatomo-trace v1; pulse=x90; variant=ZY; seed=17\n"));
        let (h, t, v) = trace_from_csv(Path::new("t.csv"), &text).unwrap();
        assert_eq!(h, header);
        assert_eq!(t, times);
        assert_eq!(v, values);
    }

    #[test]
    fn corrupted_row_names_file_and_line() {
        let header = TraceHeader {
            pulse: "identity".into(),
            variant: None,
            seed: 0,
        };
        let mut text = trace_to_csv(&header, &[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0]);
        text = text.replacen("1.0000000000000000e0,", "1.0000000000000000e0;", 1);
        match trace_from_csv(Path::new("dir/raw.csv"), &text) {
            Err(e @ Error::Parse { line: 4, .. }) => {
                assert!(e.to_string().starts_with("dir/raw.csv:4:"));
            }
            other => panic!("expected parse error on line 4, got {other:?}"),
        }
        let bad_header = text.replacen("alkatomo-trace v1", "other v2", 1);
        assert!(matches!(
            trace_from_csv(Path::new("x.csv"), &bad_header),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        write_json(&path, &[1.0f64]).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }
}
