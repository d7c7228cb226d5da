//! Regenerates `fixtures/transcript.json` and the files in
//! `fixtures/golden/` from the canned responses in `fixtures/llm/<report>/`.
//!
//! Each response directory holds `extract-N.txt` and `convert-N.txt`, the
//! answers to the N-th extraction and conversion attempt for
//! `fixtures/reports/<report>.txt`.
//!
//!     cargo run -p scengen-cli --example build_fixtures

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use scengen_core::dsl::{serialize_logical, DEFAULT_VEHICLE_LENGTH};
use scengen_core::ips::serialize_ips;
use scengen_core::llm::{convert_to_template, extract_ips, LlmError, RecordingClient, ScriptedClient, Transcript};
use scengen_core::logicalize::{logicalize, DefaultRangeTable};

const MODEL: &str = "scripted-fixture";
const MAX_RETRIES: usize = 3;

fn fixed_clock() -> u64 {
    1_767_225_600
}

fn responses(dir: &Path, prefix: &str) -> Result<Vec<String>> {
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(n) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('-')).and_then(|n| n.parse().ok()) {
            found.push((n, path));
        }
    }
    found.sort();
    found.into_iter().map(|(_, p)| fs::read_to_string(&p).with_context(|| p.display().to_string())).collect()
}

fn recorder(answers: Vec<String>) -> RecordingClient<ScriptedClient> {
    RecordingClient::new(ScriptedClient::new(answers), MODEL, None).with_clock(fixed_clock)
}

fn main() -> Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let golden = root.join("golden");
    fs::create_dir_all(&golden)?;
    let defaults = DefaultRangeTable::default();
    let mut transcript = Transcript::default();

    let mut names: Vec<String> = fs::read_dir(root.join("llm"))?
        .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_>>()?;
    names.sort();
    for name in names {
        let dir = root.join("llm").join(&name);
        let report = fs::read_to_string(root.join("reports").join(format!("{name}.txt")))?;
        let mut client = recorder(responses(&dir, "extract")?);
        let extracted = extract_ips(&report, &mut client, MAX_RETRIES);
        transcript.entries.extend(client.into_transcript().entries);
        let extraction = match extracted {
            Ok(e) => e,
            Err(LlmError::ExtractionFailed { attempts, .. }) => {
                println!("{name}: extraction fails after {attempts} attempts");
                continue;
            }
            Err(e) => return Err(e).context(name),
        };
        fs::write(golden.join(format!("{name}.ips")), serialize_ips(&extraction.ips))?;

        let mut client = recorder(responses(&dir, "convert")?);
        let converted = convert_to_template(&extraction.ips, &mut client, MAX_RETRIES);
        transcript.entries.extend(client.into_transcript().entries);
        let conversion = converted.context(name.clone())?;
        let (scenario, ego) =
            logicalize(&extraction.ips, &conversion.template, &conversion.proposed, &defaults, DEFAULT_VEHICLE_LENGTH)?;
        fs::write(golden.join(format!("{name}.lsc")), serialize_logical(&scenario))?;
        println!(
            "{name}: extraction {} attempt(s), conversion {} attempt(s), ego {}",
            extraction.attempts, conversion.attempts, ego.ego
        );
    }
    transcript.save(&root.join("transcript.json"))?;
    Ok(())
}
