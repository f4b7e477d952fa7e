use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::CliResult;

fn sink(out: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

/// CSV with the resolved configuration on a leading `# config:` line.
pub struct Csv {
    w: Box<dyn Write>,
}

impl Csv {
    pub fn create(out: Option<&Path>, config: &impl Serialize, header: &[&str]) -> CliResult<Self> {
        let mut w = sink(out)?;
        writeln!(w, "# config: {}", serde_json::to_string(config)?)?;
        writeln!(w, "{}", header.join(","))?;
        Ok(Self { w })
    }

    pub fn row(&mut self, fields: &[String]) -> CliResult<()> {
        writeln!(self.w, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.w.flush()?;
        Ok(())
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Pretty JSON `{"config": …, <key>: …}`.
pub fn write_json(out: Option<&Path>, config: &impl Serialize, key: &str, value: &impl Serialize) -> CliResult<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("config".into(), serde_json::to_value(config)?);
    doc.insert(key.into(), serde_json::to_value(value)?);
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
