use std::path::Path;

use super::Instance;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Reads a JSONL dataset, validating each instance against its kind schema.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let inst: Instance = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        inst.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}

pub fn to_jsonl(instances: &[Instance]) -> String {
    let mut s = String::new();
    for inst in instances {
        s.push_str(&serde_json::to_string(inst).expect("instances serialise"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    write_atomic(path.as_ref(), to_jsonl(instances).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{generate_instance, ProblemKind};

    #[test]
    fn lines_round_trip() {
        let insts: Vec<Instance> = ProblemKind::ALL
            .iter()
            .map(|&k| generate_instance(k, 5, 11).unwrap())
            .collect();
        let back = parse_jsonl(&to_jsonl(&insts)).unwrap();
        assert_eq!(back, insts);
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let text = "{\"kind\":\"tsp\",\"seed\":0,\"coords\":[[0,0],[1,1]]}\n{\"kind\":\"cvrp\",\"seed\":0,\"coords\":[[0,0],[1,1]]}\n";
        match parse_jsonl(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
