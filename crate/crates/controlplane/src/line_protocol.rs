//! TCP listener for the line-oriented submit protocol: one submit string or
//! `CANCEL <id>` per line, answered with `OK [<id>]` or `ERR <reason>`.

use std::sync::Arc;

use llmscale_core::submit::SubmitService;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

pub async fn serve(listener: TcpListener, service: Arc<SubmitService>) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let service = service.clone();
        tokio::spawn(async move {
            if let Err(e) = handle_connection(stream, &service).await {
                tracing::debug!(%peer, error = %e, "submit connection closed");
            }
        });
    }
}

async fn handle_connection(stream: TcpStream, service: &SubmitService) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let mut reply = service.handle_line(&line).await;
        reply.push('\n');
        write.write_all(reply.as_bytes()).await?;
    }
    Ok(())
}
