use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::Instant;

use serde::Deserialize;
use serde_json::json;

use super::{ExecStatus, ExecutionResult, Executor, SandboxError, SessionSpec};

/// Runs cells with exec() in one shared namespace and reports each cell as a
/// JSON line on the original stdout.
const DRIVER: &str = r#"
import sys, json, io, traceback, contextlib
_ns = {"__name__": "__main__"}
_out = sys.stdout
for _line in sys.stdin:
    _req = json.loads(_line)
    _so, _se = io.StringIO(), io.StringIO()
    _status, _ename = "ok", None
    with contextlib.redirect_stdout(_so), contextlib.redirect_stderr(_se):
        try:
            exec(compile(_req["code"], "<cell>", "exec"), _ns)
        except BaseException as _e:
            _status, _ename = "error", type(_e).__name__
            traceback.print_exc()
    _out.write(json.dumps({"status": _status, "stdout": _so.getvalue(),
                           "stderr": _se.getvalue(), "error_name": _ename}) + "\n")
    _out.flush()
"#;

#[derive(Deserialize)]
struct CellReply {
    status: ExecStatus,
    stdout: String,
    stderr: String,
    error_name: Option<String>,
}

/// One interpreter subprocess per session, working directory is a scratch
/// copy of the task's data directory.
#[derive(Debug, Clone)]
pub struct LocalPythonExecutor {
    python: PathBuf,
}

impl Default for LocalPythonExecutor {
    fn default() -> Self {
        Self::new("python3")
    }
}

impl LocalPythonExecutor {
    pub fn new(python: impl Into<PathBuf>) -> Self {
        Self { python: python.into() }
    }
}

fn copy_dir(src: &Path, dst: &Path) -> std::io::Result<()> {
    for entry in std::fs::read_dir(src)? {
        let entry = entry?;
        let target = dst.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            std::fs::create_dir_all(&target)?;
            copy_dir(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

impl Executor for LocalPythonExecutor {
    fn run_cells(&self, spec: &SessionSpec, cells: &[String]) -> Result<Vec<ExecutionResult>, SandboxError> {
        let unavailable = |e: std::io::Error| SandboxError::Unavailable(e.to_string());
        let workdir = tempfile::tempdir().map_err(unavailable)?;
        if let Some(data) = &spec.data_dir {
            copy_dir(data, workdir.path()).map_err(unavailable)?;
        }
        let mut child = Command::new(&self.python)
            .args(["-u", "-c", DRIVER])
            .current_dir(workdir.path())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(unavailable)?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel::<String>();
        let reader = std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let mut results = Vec::with_capacity(cells.len());
        for cell in cells {
            let started = Instant::now();
            let line = json!({ "code": cell }).to_string();
            if writeln!(stdin, "{line}").and_then(|_| stdin.flush()).is_err() {
                results.push(ExecutionResult::error("KernelDied", "interpreter exited"));
                break;
            }
            let result = match rx.recv_timeout(spec.timeout()) {
                Ok(reply) => match serde_json::from_str::<CellReply>(&reply) {
                    Ok(r) => ExecutionResult {
                        status: r.status,
                        stdout: r.stdout,
                        stderr: r.stderr,
                        error_name: r.error_name,
                        duration_ms: started.elapsed().as_millis() as u64,
                        truncated: false,
                    },
                    Err(e) => ExecutionResult::error("KernelProtocolError", e.to_string()),
                },
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    let mut r = ExecutionResult::timeout(spec.timeout_secs);
                    r.duration_ms = r.duration_ms.max(started.elapsed().as_millis() as u64);
                    r
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    ExecutionResult::error("KernelDied", "interpreter exited during cell")
                }
            };
            let stop = !result.is_ok();
            results.push(result);
            if stop {
                break;
            }
        }
        drop(stdin);
        let _ = child.kill();
        let _ = child.wait();
        let _ = reader.join();
        Ok(results)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::execute_cells;

    fn python_available() -> bool {
        Command::new("python3").arg("-c").arg("pass").status().is_ok_and(|s| s.success())
    }

    fn cells(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn shares_state_between_cells() {
        if !python_available() {
            eprintln!("python3 not found; skipping");
            return;
        }
        let r = execute_cells(&LocalPythonExecutor::default(), &SessionSpec::default(), &cells(&["x=1", "print(x)"]))
            .unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].status, ExecStatus::Ok);
        assert_eq!(r[0].stdout, "");
        assert_eq!(r[1].stdout, "1\n");
    }

    #[test]
    fn reports_errors() {
        if !python_available() {
            return;
        }
        let r = execute_cells(&LocalPythonExecutor::default(), &SessionSpec::default(), &cells(&["1/0", "print(2)"]))
            .unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].status, ExecStatus::Error);
        assert_eq!(r[0].error_name.as_deref(), Some("ZeroDivisionError"));
        assert!(!r[0].stderr.is_empty());
    }

    #[test]
    fn enforces_timeout() {
        if !python_available() {
            return;
        }
        let spec = SessionSpec { timeout_secs: 1.0, ..Default::default() };
        let r = execute_cells(&LocalPythonExecutor::default(), &spec, &cells(&["import time\ntime.sleep(9999)"]))
            .unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].status, ExecStatus::Timeout);
        assert!(r[0].duration_ms >= 1000);
    }

    #[test]
    fn sees_data_files() {
        if !python_available() {
            return;
        }
        let data = tempfile::tempdir().unwrap();
        std::fs::write(data.path().join("d.csv"), "a,b\n1,2\n").unwrap();
        let spec = SessionSpec { data_dir: Some(data.path().to_path_buf()), ..Default::default() };
        let r = execute_cells(&LocalPythonExecutor::default(), &spec, &cells(&["print(open('d.csv').read().split()[1])"]))
            .unwrap();
        assert_eq!(r[0].stdout, "1,2\n");
        // scratch copies: writes never reach the source directory
        execute_cells(&LocalPythonExecutor::default(), &spec, &cells(&["open('out.txt','w').write('x')"])).unwrap();
        assert!(!data.path().join("out.txt").exists());
    }

    #[test]
    fn missing_interpreter_is_unavailable() {
        let err = LocalPythonExecutor::new("/nonexistent/python")
            .run_cells(&SessionSpec::default(), &cells(&["x=1"]))
            .unwrap_err();
        assert!(matches!(err, SandboxError::Unavailable(_)));
    }
}
