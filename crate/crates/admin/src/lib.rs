//! Thin client over the gateway's admin routes. Every command is one HTTP
//! call (ingest adds a local intake step first); all state lives server-side.

use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reqwest::blocking::{Client, Response};
use reqwest::Method;
use serde_json::{json, Value};
use url::Url;
use verde_core::metering::{render_table, UsageReport};

#[derive(Debug, Parser)]
#[command(name = "verde-admin", version, about = "Provision courses, keys, budgets and backends on a Verde gateway")]
pub struct Cli {
    #[arg(long, env = "VERDE_ENDPOINT", default_value = "http://127.0.0.1:8080", global = true)]
    pub endpoint: String,
    #[arg(long, env = "VERDE_ADMIN_TOKEN", hide_env_values = true, global = true)]
    pub token: Option<String>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table, global = true)]
    pub output: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    #[command(subcommand)]
    User(UserCommand),
    #[command(subcommand)]
    Course(CourseCommand),
    #[command(subcommand)]
    Member(MemberCommand),
    #[command(subcommand)]
    Key(KeyCommand),
    #[command(subcommand)]
    Budget(BudgetCommand),
    #[command(subcommand)]
    Backend(BackendCommand),
    #[command(subcommand)]
    Usage(UsageCommand),
    /// Chunk local documents and load them into a gateway collection.
    Ingest(IngestArgs),
}

#[derive(Debug, Subcommand)]
pub enum UserCommand {
    Create {
        #[arg(long)]
        subject: String,
        #[arg(long, default_value = "")]
        name: String,
        #[arg(long, default_value = "")]
        email: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum CourseCommand {
    Create(CourseArgs),
    List,
}

#[derive(Debug, Args)]
pub struct CourseArgs {
    #[arg(long)]
    pub name: String,
    /// Models members may call.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long, value_parser = ["pass_through", "rag"], default_value = "pass_through")]
    pub mode: String,
    #[arg(long)]
    pub collection: Option<String>,
    /// File holding replacement teaching-assistant instructions.
    #[arg(long)]
    pub system_prompt_file: Option<PathBuf>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum MemberCommand {
    Add {
        #[arg(long)]
        course: String,
        #[arg(long)]
        user: String,
        #[arg(long, value_parser = ["student", "instructor", "admin"], default_value = "student")]
        role: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum KeyCommand {
    /// Prints the new key once; only its hash is kept server-side.
    Issue {
        #[arg(long)]
        course: String,
        #[arg(long)]
        user: String,
        #[arg(long, default_value = "")]
        label: String,
    },
    Revoke {
        #[arg(long = "key-id")]
        key_id: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum BudgetCommand {
    Set {
        #[arg(long)]
        course: String,
        /// New limit in microcredits.
        #[arg(long, allow_negative_numbers = true)]
        limit: i64,
    },
    Add {
        #[arg(long)]
        course: String,
        #[arg(long, allow_negative_numbers = true)]
        amount: i64,
    },
    Show {
        #[arg(long)]
        course: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum BackendCommand {
    Register {
        #[arg(long)]
        name: String,
        #[arg(long, value_parser = ["self_hosted", "proxy"])]
        class: String,
        #[arg(long)]
        base_url: String,
        #[arg(long, default_value = "")]
        credential_ref: String,
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// `model=input_per_1k:output_per_1k`, in microcredits.
        #[arg(long = "price")]
        prices: Vec<String>,
        #[arg(long)]
        timeout_ms: Option<u64>,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum UsageCommand {
    Report {
        /// RFC 3339 timestamp or YYYY-MM-DD.
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        course: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub collection: String,
    #[arg(long, default_value_t = 512)]
    pub chunk_size: usize,
    #[arg(long, default_value_t = 64)]
    pub overlap: usize,
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("request failed: {0}")]
    Transport(String),
    #[error("gateway returned {status}: {body}")]
    Api { status: u16, body: String },
    #[error("ingest failed: {0}")]
    Ingest(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Ingest(msg) if msg.starts_with("usage:") => 2,
            _ => 1,
        }
    }
}

/// A successful call: the raw response body and how to show it as a table.
pub struct Outcome {
    pub body: Vec<u8>,
    pub kind: View,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Generic,
    Usage,
    IssuedKey,
}

impl Outcome {
    pub fn render(&self, format: OutputFormat) -> Vec<u8> {
        match format {
            OutputFormat::Json => self.body.clone(),
            OutputFormat::Table => {
                let value: Value = serde_json::from_slice(&self.body).unwrap_or(Value::Null);
                let text = match self.kind {
                    View::Usage => match serde_json::from_value::<UsageReport>(value.clone()) {
                        Ok(report) => render_table(&report),
                        Err(_) => generic_table(&value),
                    },
                    View::IssuedKey => format!(
                        "key_id   {}\napi_key  {}\nThis key is shown once. Store it now.\n",
                        scalar(&value["id"]),
                        scalar(&value["api_key"])
                    ),
                    View::Generic => generic_table(&value),
                };
                text.into_bytes()
            }
        }
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        Value::Array(items) => items.iter().map(scalar).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Objects as `key  value` lines; arrays as one line per element.
fn generic_table(value: &Value) -> String {
    match value {
        Value::Array(items) if items.is_empty() => "(none)\n".into(),
        Value::Array(items) => items
            .iter()
            .map(|item| match item {
                Value::Object(map) => {
                    let cells: Vec<String> = map
                        .iter()
                        .filter(|(_, v)| !v.is_object())
                        .map(|(k, v)| format!("{k}={}", scalar(v)))
                        .collect();
                    cells.join("  ") + "\n"
                }
                other => scalar(other) + "\n",
            })
            .collect(),
        Value::Object(map) => {
            let width = map.keys().map(String::len).max().unwrap_or(0);
            map.iter()
                .filter(|(_, v)| !v.is_object())
                .map(|(k, v)| format!("{k:<width$}  {}\n", scalar(v)))
                .collect()
        }
        other => scalar(other) + "\n",
    }
}

pub struct AdminClient {
    http: Client,
    endpoint: Url,
    token: String,
}

impl AdminClient {
    pub fn new(endpoint: &str, token: &str) -> Result<Self, CliError> {
        let endpoint = Url::parse(endpoint).map_err(|e| CliError::Usage(format!("invalid endpoint `{endpoint}`: {e}")))?;
        if !matches!(endpoint.scheme(), "http" | "https") {
            return Err(CliError::Usage(format!("endpoint must be http or https, got `{}`", endpoint.scheme())));
        }
        let http = Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| CliError::Transport(e.to_string()))?;
        Ok(Self { http, endpoint, token: token.to_string() })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.endpoint.as_str().trim_end_matches('/'))
    }

    fn send(&self, method: Method, path: &str, body: Option<Vec<u8>>) -> Result<Vec<u8>, CliError> {
        let mut req = self.http.request(method, self.url(path)).bearer_auth(&self.token);
        if let Some(body) = body {
            req = req.header("content-type", "application/json").body(body);
        }
        let resp: Response = req.send().map_err(|e| CliError::Transport(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| CliError::Transport(e.to_string()))?.to_vec();
        if !status.is_success() {
            return Err(CliError::Api { status: status.as_u16(), body: String::from_utf8_lossy(&bytes).into_owned() });
        }
        Ok(bytes)
    }

    pub fn get(&self, path: &str) -> Result<Vec<u8>, CliError> {
        self.send(Method::GET, path, None)
    }

    pub fn post(&self, path: &str, body: &Value) -> Result<Vec<u8>, CliError> {
        self.send(Method::POST, path, Some(body.to_string().into_bytes()))
    }

    pub fn put(&self, path: &str, body: &Value) -> Result<Vec<u8>, CliError> {
        self.send(Method::PUT, path, Some(body.to_string().into_bytes()))
    }

    pub fn delete(&self, path: &str) -> Result<Vec<u8>, CliError> {
        self.send(Method::DELETE, path, None)
    }

    pub fn put_raw(&self, path: &str, body: Vec<u8>) -> Result<Vec<u8>, CliError> {
        self.send(Method::PUT, path, Some(body))
    }
}

fn non_negative(flag: &str, value: i64) -> Result<u64, CliError> {
    u64::try_from(value).map_err(|_| CliError::Usage(format!("--{flag} must be a non-negative number of microcredits")))
}

fn segment(s: &str) -> String {
    url::form_urlencoded::byte_serialize(s.as_bytes()).collect()
}

fn parse_price(raw: &str) -> Result<Value, CliError> {
    let bad = || CliError::Usage(format!("invalid --price `{raw}`, expected model=input:output"));
    let (model, rates) = raw.split_once('=').ok_or_else(bad)?;
    let (input, output) = rates.split_once(':').ok_or_else(bad)?;
    let input: u64 = input.trim().parse().map_err(|_| bad())?;
    let output: u64 = output.trim().parse().map_err(|_| bad())?;
    Ok(json!({"model": model.trim(), "input_per_1k_tokens": input, "output_per_1k_tokens": output}))
}

/// Validates arguments, then performs the command's request(s).
pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    // Checks that need no network run before the client is even built.
    match &cli.command {
        Command::Budget(BudgetCommand::Set { limit, .. }) => {
            non_negative("limit", *limit)?;
        }
        Command::Budget(BudgetCommand::Add { amount, .. }) => {
            non_negative("amount", *amount)?;
        }
        Command::Backend(BackendCommand::Register { prices, .. }) => {
            prices.iter().map(|p| parse_price(p)).collect::<Result<Vec<_>, _>>()?;
        }
        _ => {}
    }
    let token = cli
        .token
        .as_deref()
        .filter(|t| !t.is_empty())
        .ok_or_else(|| CliError::Usage("an admin token is required (--token or VERDE_ADMIN_TOKEN)".into()))?;
    let client = AdminClient::new(&cli.endpoint, token)?;
    let generic = |body| Ok(Outcome { body, kind: View::Generic });

    match &cli.command {
        Command::User(UserCommand::Create { subject, name, email }) => {
            generic(client.post("/admin/users", &json!({"external_subject": subject, "display_name": name, "email": email}))?)
        }
        Command::Course(CourseCommand::Create(a)) => {
            let system_prompt_override = match &a.system_prompt_file {
                Some(path) => Some(
                    std::fs::read_to_string(path)
                        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?,
                ),
                None => None,
            };
            let body = json!({
                "name": a.name,
                "allowed_models": a.models,
                "mode": a.mode,
                "collection_id": a.collection,
                "system_prompt_override": system_prompt_override,
                "default_temperature": a.temperature,
                "rag_top_k": a.top_k,
                "rag_threshold": a.threshold,
            });
            generic(client.post("/admin/courses", &body)?)
        }
        Command::Course(CourseCommand::List) => generic(client.get("/admin/courses")?),
        Command::Member(MemberCommand::Add { course, user, role }) => generic(client.post(
            &format!("/admin/courses/{}/members", segment(course)),
            &json!({"user_id": user, "role": role}),
        )?),
        Command::Key(KeyCommand::Issue { course, user, label }) => Ok(Outcome {
            body: client.post(&format!("/admin/courses/{}/keys", segment(course)), &json!({"user_id": user, "label": label}))?,
            kind: View::IssuedKey,
        }),
        Command::Key(KeyCommand::Revoke { key_id }) => generic(client.delete(&format!("/admin/keys/{}", segment(key_id)))?),
        Command::Budget(BudgetCommand::Set { course, limit }) => generic(client.put(
            &format!("/admin/courses/{}/budget", segment(course)),
            &json!({"limit_microcredits": non_negative("limit", *limit)?}),
        )?),
        Command::Budget(BudgetCommand::Add { course, amount }) => generic(client.post(
            &format!("/admin/courses/{}/budget/funds", segment(course)),
            &json!({"amount_microcredits": non_negative("amount", *amount)?}),
        )?),
        Command::Budget(BudgetCommand::Show { course }) => {
            generic(client.get(&format!("/admin/courses/{}/budget", segment(course)))?)
        }
        Command::Backend(BackendCommand::Register { name, class, base_url, credential_ref, models, prices, timeout_ms }) => {
            let prices = prices.iter().map(|p| parse_price(p)).collect::<Result<Vec<_>, _>>()?;
            let mut body = json!({
                "name": name,
                "class": class,
                "base_url": base_url,
                "credential_ref": credential_ref,
                "model_names": models,
                "prices": prices,
            });
            if let Some(t) = timeout_ms {
                body["timeout_ms"] = json!(t);
            }
            generic(client.post("/admin/backends", &body)?)
        }
        Command::Backend(BackendCommand::List) => generic(client.get("/admin/backends")?),
        Command::Usage(UsageCommand::Report { from, to, course }) => {
            let mut path = format!("/admin/usage?from={}&to={}", segment(from), segment(to));
            if let Some(c) = course {
                path.push_str(&format!("&course_id={}", segment(c)));
            }
            Ok(Outcome { body: client.get(&path)?, kind: View::Usage })
        }
        Command::Ingest(a) => ingest(&client, a),
    }
}

/// Runs intake locally into a temporary export, then uploads it.
fn ingest(client: &AdminClient, a: &IngestArgs) -> Result<Outcome, CliError> {
    let dir = std::env::temp_dir().join(format!("verde-admin-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Ingest(e.to_string()))?;
    let out = dir.join(format!("{}.jsonl", segment(&a.collection)));
    let args = verde_intake::Args {
        collection: a.collection.clone(),
        chunk_size: a.chunk_size,
        overlap: a.overlap,
        out: Some(out.clone()),
        from: None,
        paths: a.paths.clone(),
    };
    let result = verde_intake::run(&args);
    let export = result.as_ref().ok().map(|_| std::fs::read(&out));
    let _ = std::fs::remove_dir_all(&dir);
    match result {
        Ok(report) => eprintln!(
            "ingested {} documents into {} chunks ({} skipped)",
            report.stats.documents, report.stats.chunks, report.stats.skipped
        ),
        Err(e) if e.exit_code() == 2 => return Err(CliError::Ingest(format!("usage: {e}"))),
        Err(e) => return Err(CliError::Ingest(e.to_string())),
    }
    let export = export.expect("present on success").map_err(|e| CliError::Ingest(e.to_string()))?;

    match client.post("/admin/collections", &json!({"id": a.collection})) {
        Ok(_) | Err(CliError::Api { status: 409, .. }) => {}
        Err(e) => return Err(e),
    }
    let body = client.put_raw(&format!("/admin/collections/{}/import", segment(&a.collection)), export)?;
    Ok(Outcome { body, kind: View::Generic })
}
