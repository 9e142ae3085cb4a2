//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or general error, 2 integrity error,
//! 3 transfer error. Every subcommand accepts `--json` for machine-readable
//! output on stdout.
//!
//! Settings come from a `key=value` file (`--config`, or `CDMT_CONFIG`),
//! overridden by flags. Blank lines and lines starting with `#` are ignored.
//! Keys:
//!
//! | key                   | meaning                                  |
//! |-----------------------|------------------------------------------|
//! | `chunk_mode`          | `cdc` or `fixed`                         |
//! | `mask_bits`           | boundary mask width                      |
//! | `window_size`         | rolling window in bytes                  |
//! | `min_chunk`           | smallest chunk in bytes                  |
//! | `max_chunk`           | largest chunk in bytes                   |
//! | `fixed_width`         | chunk width in fixed mode                |
//! | `internal_mask_bits`  | tree boundary mask width (used by `init`)|
//! | `internal_window`     | tree boundary window (used by `init`)    |
//! | `max_fanout`          | tree fanout cap (used by `init`)         |
//! | `compress`            | `true` to store chunks compressed        |
//! | `paranoid`            | `true` to re-hash chunks on every read   |
//! | `registry`            | default registry for push and pull       |

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::cdmt::{cdmt_compare_with, cdmt_serialize, CdmtConfig};
use crate::chunker::{ChunkMode, ChunkStream, ChunkerConfig};
use crate::error::{Error, Result};
use crate::metrics::{bench, gnuplot_header, load_corpus, CSV_HEADER};
use crate::store::{Store, StoreOptions};
use crate::transfer::{open_registry, pull, push, registry_serve, TransferReport};
use crate::versioning::VersionKind;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_INTEGRITY: u8 = 2;
pub const EXIT_TRANSFER: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "cdmt",
    version,
    about = "Deduplicating chunk store with a content-defined Merkle tree index"
)]
struct Cli {
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,

    /// key=value settings file.
    #[arg(long, global = true, env = "CDMT_CONFIG")]
    config: Option<PathBuf>,

    #[command(flatten)]
    chunking: ChunkFlags,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ChunkFlags {
    /// Boundary mask width in bits.
    #[arg(long, global = true)]
    mask_bits: Option<u32>,
    /// Smallest chunk in bytes.
    #[arg(long, global = true)]
    min: Option<usize>,
    /// Largest chunk in bytes.
    #[arg(long, global = true)]
    max: Option<usize>,
    /// Rolling window in bytes.
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Use fixed-width chunks of this many bytes.
    #[arg(long, global = true)]
    fixed: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create an empty store.
    Init { store: PathBuf },
    /// Chunk files into the store; with --image, record them as one version.
    Ingest {
        store: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// name:tag of the version to record.
        #[arg(long)]
        image: Option<String>,
        /// Tag of the parent version.
        #[arg(long)]
        parent: Option<String>,
        /// Record a layering version (in place) instead of a branching one.
        #[arg(long)]
        layering: bool,
    },
    /// Rebuild a layer, or all layers of name:tag, into a file.
    Restore {
        store: PathBuf,
        what: String,
        out: PathBuf,
    },
    /// Print the chunk manifest of a file: offset, length, fingerprint.
    Chunk { file: PathBuf },
    /// Write the serialized index of name:tag.
    BuildIndex {
        store: PathBuf,
        image: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List leaf fingerprints of the second version that the first lacks.
    Compare {
        store: PathBuf,
        from: String,
        to: String,
    },
    /// Publish name:tag: `push [REGISTRY] NAME:TAG`.
    Push {
        #[arg(long, default_value = ".cdmt")]
        store: PathBuf,
        #[arg(num_args = 1..=2, required = true)]
        args: Vec<String>,
    },
    /// Fetch name:tag: `pull [REGISTRY] NAME:TAG`.
    Pull {
        #[arg(long, default_value = ".cdmt")]
        store: PathBuf,
        #[arg(num_args = 1..=2, required = true)]
        args: Vec<String>,
    },
    /// Serve a store as a network registry.
    Serve {
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
    },
    /// Remove chunks no recorded version or loose layer uses.
    Gc { store: PathBuf },
    /// Compute dedup, compression, commonality and timing metrics.
    Bench {
        /// Directory of version files, or synthetic:key=value,...
        #[arg(long)]
        corpus: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write whitespace-separated output for gnuplot.
        #[arg(long)]
        gnuplot: bool,
    },
    /// Summarize a store.
    Stats { store: PathBuf },
}

#[derive(Debug, Default)]
struct Settings {
    chunker: ChunkerConfig,
    cdmt: CdmtConfig,
    options: StoreOptions,
    registry: Option<String>,
}

fn parse_bool(k: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!(
            "{k}: expected a boolean, got {v}"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("{k}: expected a number, got {v}")))
}

impl Settings {
    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key=value", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "chunk_mode" => {
                    self.chunker.mode = match v {
                        "cdc" => ChunkMode::Cdc,
                        "fixed" => ChunkMode::Fixed,
                        _ => return Err(Error::InvalidConfig(format!("chunk_mode: {v}"))),
                    }
                }
                "mask_bits" => self.chunker.mask_bits = parse_num(k, v)?,
                "window_size" => self.chunker.window_size = parse_num(k, v)?,
                "min_chunk" => self.chunker.min_chunk = parse_num(k, v)?,
                "max_chunk" => self.chunker.max_chunk = parse_num(k, v)?,
                "fixed_width" => self.chunker.fixed_width = parse_num(k, v)?,
                "internal_mask_bits" => self.cdmt.internal_mask_bits = parse_num(k, v)?,
                "internal_window" => self.cdmt.window_size = parse_num(k, v)?,
                "max_fanout" => self.cdmt.max_fanout = parse_num(k, v)?,
                "compress" => self.options.compress_chunks = parse_bool(k, v)?,
                "paranoid" => self.options.paranoid = parse_bool(k, v)?,
                "registry" => self.registry = Some(v.to_string()),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "line {}: unknown key {k}",
                        n + 1
                    )))
                }
            }
        }
        Ok(())
    }

    fn load(cli: &Cli) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &cli.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            s.apply_text(&text)?;
        }
        let f = &cli.chunking;
        if let Some(v) = f.mask_bits {
            s.chunker.mask_bits = v;
        }
        if let Some(v) = f.min {
            s.chunker.min_chunk = v;
        }
        if let Some(v) = f.max {
            s.chunker.max_chunk = v;
        }
        if let Some(v) = f.window {
            s.chunker.window_size = v;
        }
        if let Some(v) = f.fixed {
            s.chunker.mode = ChunkMode::Fixed;
            s.chunker.fixed_width = v;
        }
        s.chunker.validate()?;
        Ok(s)
    }
}

fn split_image(spec: &str) -> Result<(&str, &str)> {
    match spec.split_once(':') {
        Some((n, t)) if !n.is_empty() && !t.is_empty() => Ok((n, t)),
        _ => Err(Error::InvalidConfig(format!(
            "expected name:tag, got {spec:?}"
        ))),
    }
}

/// Registry and image from `[REGISTRY] NAME:TAG`, falling back to
/// `CDMT_REGISTRY` and then the config file.
fn registry_args(args: &[String], settings: &Settings) -> Result<(String, String)> {
    match args {
        [reg, image] => Ok((reg.clone(), image.clone())),
        [image] => std::env::var("CDMT_REGISTRY")
            .ok()
            .or_else(|| settings.registry.clone())
            .map(|r| (r, image.clone()))
            .ok_or_else(|| {
                Error::InvalidConfig("no registry given and CDMT_REGISTRY is unset".into())
            }),
        _ => Err(Error::InvalidConfig("expected [REGISTRY] NAME:TAG".into())),
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Integrity(_) | Error::CorruptIndex { .. } | Error::MissingChunk(_) => EXIT_INTEGRITY,
        Error::Transfer(_) | Error::Protocol(_) => EXIT_TRANSFER,
        _ => EXIT_USAGE,
    }
}

struct Output<'a> {
    json: bool,
    out: &'a mut dyn Write,
}

impl Output<'_> {
    /// Emits `value` as JSON, or `text` otherwise.
    fn emit(&mut self, value: serde_json::Value, text: impl FnOnce() -> String) -> Result<()> {
        if self.json {
            writeln!(self.out, "{value}")?;
        } else {
            let t = text();
            if !t.is_empty() {
                writeln!(self.out, "{t}")?;
            }
        }
        Ok(())
    }
}

fn report_text(r: &TransferReport) -> String {
    format!(
        "{:?}: {} chunks sent ({} bytes), {} skipped, {} index bytes",
        r.direction, r.chunks_sent, r.bytes_payload, r.chunks_skipped, r.bytes_index
    )
}

fn execute(cli: &Cli, out: &mut Output) -> Result<()> {
    let settings = Settings::load(cli)?;
    let open = |p: &Path| Store::open(p, settings.options.clone());
    match &cli.command {
        Command::Init { store } => {
            Store::init(store, &settings.cdmt, settings.options.clone())?;
            out.emit(json!({"store": store}), || {
                format!("initialized {}", store.display())
            })
        }
        Command::Ingest {
            store,
            files,
            image,
            parent,
            layering,
        } => {
            let mut s = open(store)?;
            let mut layers = Vec::new();
            let mut rows = Vec::new();
            for f in files {
                let o = s.ingest(BufReader::new(File::open(f)?), &settings.chunker)?;
                rows.push(json!({
                    "file": f, "layer_id": o.recipe.layer_id, "chunks": o.recipe.len(),
                    "new_chunks": o.new_chunks, "dup_chunks": o.dup_chunks,
                    "new_bytes": o.new_bytes, "dup_bytes": o.dup_bytes,
                }));
                layers.push(o.recipe.layer_id);
            }
            let version = match image {
                Some(spec) => {
                    let (name, tag) = split_image(spec)?;
                    let kind = if *layering {
                        VersionKind::Layering
                    } else {
                        VersionKind::Branching
                    };
                    Some(s.commit_version(name, tag, kind, parent.as_deref(), layers.clone())?)
                }
                None => None,
            };
            out.emit(json!({"layers": rows, "version": version}), || {
                let mut t = layers.join("\n");
                if let Some(v) = &version {
                    t.push_str(&format!("\nrecorded {}:{} root {}", v.name, v.tag, v.root));
                }
                t
            })
        }
        Command::Restore {
            store,
            what,
            out: dest,
        } => {
            let s = open(store)?;
            let layers = match what.split_once(':') {
                Some((name, tag)) => s.version(name, tag)?.layers,
                None => vec![what.clone()],
            };
            let mut w = BufWriter::new(File::create(dest)?);
            let mut bytes = 0;
            for l in &layers {
                bytes += s.restore(&s.recipe(l)?, &mut w)?;
            }
            w.flush()?;
            out.emit(json!({"bytes": bytes, "layers": layers.len()}), || {
                format!("restored {bytes} bytes to {}", dest.display())
            })
        }
        Command::Chunk { file } => {
            let mut rows = Vec::new();
            let mut text = String::new();
            for c in ChunkStream::new(BufReader::new(File::open(file)?), &settings.chunker)? {
                let c = c?;
                if out.json {
                    rows.push(json!({"offset": c.offset, "length": c.length, "fp": c.fp.to_hex()}));
                } else {
                    text.push_str(&format!("{}\t{}\t{}\n", c.offset, c.length, c.fp.to_hex()));
                }
            }
            if out.json {
                out.emit(json!(rows), String::new)
            } else {
                out.out.write_all(text.as_bytes())?;
                Ok(())
            }
        }
        Command::BuildIndex {
            store,
            image,
            out: dest,
        } => {
            let s = open(store)?;
            let (name, tag) = split_image(image)?;
            let ix = s.image_index(name)?;
            let (_, id) = ix
                .by_tag(tag)
                .ok_or_else(|| Error::NotFound(image.clone()))?;
            let bytes = cdmt_serialize(&ix.tree, id)?;
            let stats = ix.tree.stats(id.ordinal)?;
            if let Some(d) = dest {
                std::fs::write(d, &bytes)?;
            }
            out.emit(
                json!({
                    "root": ix.tree.root_id(id.ordinal)?.to_hex(), "bytes": bytes.len(),
                    "leaves": stats.leaves, "internal": stats.internal, "height": stats.height,
                    "mean_fanout": stats.mean_fanout,
                }),
                || {
                    format!(
                        "{} leaves, {} internal nodes, height {}, {} index bytes",
                        stats.leaves,
                        stats.internal,
                        stats.height,
                        bytes.len()
                    )
                },
            )
        }
        Command::Compare { store, from, to } => {
            let s = open(store)?;
            let (n1, t1) = split_image(from)?;
            let (n2, t2) = split_image(to)?;
            let a = s.image_index(n1)?;
            let b = s.image_index(n2)?;
            let (_, va) = a.by_tag(t1).ok_or_else(|| Error::NotFound(from.clone()))?;
            let (_, vb) = b.by_tag(t2).ok_or_else(|| Error::NotFound(to.clone()))?;
            let known: HashSet<_> = a
                .tree
                .level_ids(va.ordinal)?
                .into_iter()
                .flatten()
                .collect();
            let outcome = cdmt_compare_with(&known, &b.tree, vb.ordinal)?;
            let missing: Vec<String> = outcome.missing.iter().map(|f| f.to_hex()).collect();
            out.emit(
                json!({"missing": missing, "examined": outcome.examined}),
                || missing.join("\n"),
            )
        }
        Command::Push { store, args } => {
            let (reg, image) = registry_args(args, &settings)?;
            let (name, tag) = split_image(&image)?;
            let s = open(store)?;
            let report = push(&s, open_registry(&reg)?.as_mut(), name, tag)?;
            out.emit(json!(report), || report_text(&report))
        }
        Command::Pull { store, args } => {
            let (reg, image) = registry_args(args, &settings)?;
            let (name, tag) = split_image(&image)?;
            let mut s = match Store::open(store, settings.options.clone()) {
                Err(Error::NotFound(_)) => {
                    Store::init(store, &settings.cdmt, settings.options.clone())?
                }
                other => other?,
            };
            let report = pull(&mut s, open_registry(&reg)?.as_mut(), name, tag)?;
            out.emit(json!(report), || report_text(&report))
        }
        Command::Serve { store, listen } => {
            let handle = registry_serve(store, listen)?;
            out.emit(
                json!({"listening": handle.local_addr().to_string()}),
                || format!("serving {} on {}", store.display(), handle.local_addr()),
            )?;
            out.out.flush()?;
            handle.wait();
            Ok(())
        }
        Command::Gc { store } => {
            let mut s = open(store)?;
            let live = s.all_versions();
            let reclaimed = s.gc(&live)?;
            out.emit(json!({"reclaimed_bytes": reclaimed}), || {
                format!("reclaimed {reclaimed} bytes")
            })
        }
        Command::Bench {
            corpus,
            out: dest,
            gnuplot,
        } => {
            let versions = load_corpus(corpus)?;
            let row = bench(corpus, &versions, &settings.chunker, &settings.cdmt)?;
            let (header, line) = if *gnuplot {
                (gnuplot_header(), row.gnuplot_line())
            } else {
                (CSV_HEADER.to_string(), row.csv_line())
            };
            let table = format!("{header}\n{line}\n");
            if let Some(d) = dest {
                std::fs::write(d, &table)?;
            }
            out.emit(json!(row), || table.trim_end().to_string())
        }
        Command::Stats { store } => {
            let st = open(store)?.stats()?;
            out.emit(json!(st), || {
                format!(
                    "{} chunks, {} stored bytes, {} logical bytes, {} layers, {} images, {} versions",
                    st.chunks, st.stored_bytes, st.logical_bytes, st.layers, st.images, st.versions
                )
            })
        }
    }
}

/// Runs the CLI on `args` and returns the process exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let json = cli.json;
    match execute(&cli, &mut Output { json, out }) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code_for(&e);
            let _ = if json {
                writeln!(
                    err,
                    "{}",
                    json!({"error": e.to_string(), "exit_code": code})
                )
            } else {
                writeln!(err, "error: {e}")
            };
            code
        }
    }
}

pub fn run() -> ExitCode {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    ExitCode::from(run_with(std::env::args_os(), &mut out, &mut io::stderr()))
}
