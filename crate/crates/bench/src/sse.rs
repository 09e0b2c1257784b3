//! Incremental parsing of OpenAI-style server-sent event streams.

use serde_json::Value;

/// What one `data:` payload carries, as far as timing is concerned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkInfo {
    /// The chunk has a non-empty content delta (chat) or text (completions).
    pub has_content: bool,
    /// `usage.completion_tokens`, when the chunk reports usage.
    pub completion_tokens: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SseEvent {
    Data(String),
    Done,
}

/// Splits a byte stream into events. Bytes may arrive in arbitrary pieces.
#[derive(Debug, Default)]
pub struct SseParser {
    buf: Vec<u8>,
}

fn event_end(buf: &[u8]) -> Option<(usize, usize)> {
    let mut i = 0;
    while i + 1 < buf.len() {
        if buf[i] == b'\n' && buf[i + 1] == b'\n' {
            return Some((i, 2));
        }
        if i + 3 < buf.len() && &buf[i..i + 4] == b"\r\n\r\n" {
            return Some((i, 4));
        }
        i += 1;
    }
    None
}

impl SseParser {
    pub fn push(&mut self, bytes: &[u8]) -> Vec<SseEvent> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        while let Some((end, sep)) = event_end(&self.buf) {
            let block: Vec<u8> = self.buf.drain(..end + sep).take(end).collect();
            let text = String::from_utf8_lossy(&block);
            let data: Vec<&str> = text
                .lines()
                .filter_map(|l| l.strip_prefix("data:"))
                .map(|d| d.strip_prefix(' ').unwrap_or(d))
                .collect();
            if data.is_empty() {
                continue;
            }
            let data = data.join("\n");
            out.push(if data.trim() == "[DONE]" {
                SseEvent::Done
            } else {
                SseEvent::Data(data)
            });
        }
        out
    }
}

pub fn classify(data: &str) -> ChunkInfo {
    let Ok(v) = serde_json::from_str::<Value>(data) else {
        return ChunkInfo {
            has_content: false,
            completion_tokens: None,
        };
    };
    let first = v.get("choices").and_then(Value::as_array).and_then(|c| c.first());
    let text = first.and_then(|c| {
        c.get("delta")
            .and_then(|d| d.get("content"))
            .or_else(|| c.get("text"))
            .and_then(Value::as_str)
    });
    ChunkInfo {
        has_content: text.is_some_and(|t| !t.is_empty()),
        completion_tokens: v
            .get("usage")
            .and_then(|u| u.get("completion_tokens"))
            .and_then(Value::as_u64)
            .map(|n| n as u32),
    }
}
