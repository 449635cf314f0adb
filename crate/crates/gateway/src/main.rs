use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tokio::net::TcpListener;
use tracing::info;
use tracing_subscriber::EnvFilter;
use verde_gateway::mock::{MockConfig, MockUpstream};
use verde_gateway::{Gateway, GatewayConfig, SecretStore};

#[derive(Parser)]
#[command(name = "verde-gateway", version, about = "OpenAI-compatible course LLM gateway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway.
    Serve {
        #[arg(long, short)]
        config: PathBuf,
        /// Overrides `server.admin_token`.
        #[arg(long, env = "VERDE_ADMIN_TOKEN", hide_env_values = true)]
        admin_token: Option<String>,
        /// Overrides `server.listen_addr`.
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
    /// Run the deterministic mock upstream.
    MockUpstream {
        #[arg(long, default_value = "127.0.0.1:9100")]
        listen: SocketAddr,
        /// Model names to serve.
        #[arg(long = "model", default_values_t = vec!["mock-echo".to_string()])]
        models: Vec<String>,
        /// Require this bearer credential.
        #[arg(long, env = "VERDE_MOCK_SECRET", hide_env_values = true)]
        secret: Option<String>,
    },
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve { config, admin_token, listen } => {
            let mut config = GatewayConfig::load(&config)?;
            if let Some(addr) = listen {
                config.server.listen_addr = addr;
            }
            let secrets = match &config.secrets.path {
                Some(path) => SecretStore::load(path)?,
                None => SecretStore::default(),
            };
            let addr = config.server.listen_addr;
            let mut gateway = Gateway::open(config, secrets).context("opening gateway state")?;
            if let Some(token) = admin_token {
                gateway = gateway.with_admin_token(token);
            }
            let listener = TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
            info!(addr = %listener.local_addr()?, "gateway listening");
            verde_gateway::serve(listener, Arc::new(gateway)).await?;
        }
        Command::MockUpstream { listen, models, secret } => {
            let listener = TcpListener::bind(listen).await.with_context(|| format!("binding {listen}"))?;
            let config = MockConfig { models, expected_secret: secret, ..Default::default() };
            let mock = MockUpstream::serve(listener, config)?;
            info!(base_url = %mock.base_url(), "mock upstream listening");
            tokio::signal::ctrl_c().await?;
        }
    }
    Ok(())
}
