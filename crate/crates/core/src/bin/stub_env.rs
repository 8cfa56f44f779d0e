//! Reference implementation of the external environment line protocol.
//!
//! `reset` replies with a fixed stub observation that embeds the task spec;
//! `step` echoes the action and finishes the episode on `finish`.
//!
//! Flags for exercising client error paths:
//!   --garbage-after N   reply to request N with a non-JSON line
//!   --wrong-id-after N  reply to request N with a mismatched id
//!   --silent            read requests but never reply
//!   --exit-immediately  close stdout without reading anything

use std::io::{self, BufRead, Write};

use serde_json::{json, Value};

fn flag_value(args: &[String], name: &str) -> Option<u64> {
    args.iter()
        .position(|a| a == name)
        .and_then(|i| args.get(i + 1))
        .and_then(|v| v.parse().ok())
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--exit-immediately") {
        return;
    }
    let silent = args.iter().any(|a| a == "--silent");
    let garbage_after = flag_value(&args, "--garbage-after");
    let wrong_id_after = flag_value(&args, "--wrong-id-after");

    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut served = 0u64;
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if silent {
            continue;
        }
        served += 1;
        if garbage_after == Some(served) {
            writeln!(out, "this is not json").ok();
            out.flush().ok();
            continue;
        }
        let req: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => break,
        };
        let mut id = req.get("id").and_then(Value::as_u64).unwrap_or(0);
        if wrong_id_after == Some(served) {
            id += 1000;
        }
        let reply = match req.get("cmd").and_then(Value::as_str) {
            Some("reset") => {
                let spec = req.get("spec").cloned().unwrap_or(Value::Null);
                json!({
                    "id": id,
                    "observation": format!("stub world ready: {spec}"),
                    "done": false,
                    "success": false,
                    "score": 0.0
                })
            }
            Some("step") => {
                let action = req.get("action").and_then(Value::as_str).unwrap_or("");
                let finished = action == "finish";
                json!({
                    "id": id,
                    "observation": format!("echo: {action}"),
                    "done": finished,
                    "success": finished,
                    "score": if finished { 1.0 } else { 0.0 }
                })
            }
            _ => break,
        };
        writeln!(out, "{reply}").ok();
        out.flush().ok();
    }
}
