//! Spawning one child with limits, capped output capture and a hard deadline.

use std::ffi::OsStr;
use std::io::{self, Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use wait_timeout::ChildExt;

use super::SandboxError;

pub(crate) struct ProcessRequest<'a> {
    pub argv: &'a [String],
    pub cwd: &'a Path,
    pub stdin: Option<&'a [u8]>,
    pub timeout: Duration,
    pub memory_cap: Option<u64>,
    pub output_cap: usize,
    pub path_var: &'a OsStr,
}

pub(crate) struct ProcessOutput {
    pub status: Option<ExitStatus>,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub timed_out: bool,
}

impl ProcessOutput {
    pub fn success(&self) -> bool {
        self.status.is_some_and(|s| s.success())
    }

    pub fn killed_by_sigkill(&self) -> bool {
        self.status.and_then(|s| s.signal()) == Some(libc::SIGKILL)
    }

    pub fn stdout_text(&self) -> String {
        String::from_utf8_lossy(&self.stdout).into_owned()
    }

    pub fn stderr_text(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }
}

/// Reads everything from `pipe`, keeping at most `cap` bytes. The rest is
/// drained so the child never blocks on a full pipe.
fn capture<R: Read + Send + 'static>(mut pipe: R, cap: usize) -> JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
        kept
    })
}

fn set_limit(resource: libc::__rlimit_resource_t, value: u64) -> io::Result<()> {
    let limit = libc::rlimit { rlim_cur: value as libc::rlim_t, rlim_max: value as libc::rlim_t };
    // SAFETY: setrlimit only reads the struct passed by reference.
    if unsafe { libc::setrlimit(resource, &limit) } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

fn spawn(req: &ProcessRequest) -> Result<Child, SandboxError> {
    let (program, args) = req
        .argv
        .split_first()
        .ok_or_else(|| SandboxError::Environment("empty command".into()))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(req.cwd)
        .env_clear()
        .env("PATH", req.path_var)
        .env("HOME", req.cwd)
        .env("TMPDIR", req.cwd)
        .env("LANG", "C.UTF-8")
        .stdin(if req.stdin.is_some() { Stdio::piped() } else { Stdio::null() })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    let memory_cap = req.memory_cap;
    // SAFETY: the closure only calls async-signal-safe libc functions.
    unsafe {
        cmd.pre_exec(move || {
            if libc::setsid() == -1 {
                return Err(io::Error::last_os_error());
            }
            set_limit(libc::RLIMIT_CORE, 0)?;
            if let Some(cap) = memory_cap {
                set_limit(libc::RLIMIT_DATA, cap)?;
            }
            Ok(())
        });
    }
    cmd.spawn().map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => SandboxError::Environment(format!("runner binary {program:?} not found")),
        _ => SandboxError::Environment(format!("cannot spawn {program:?}: {e}")),
    })
}

fn kill_group(child: &Child) {
    // The child leads its own session, so its pid is the process group id.
    // SAFETY: plain syscall on a pid we own.
    unsafe {
        libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
    }
}

pub(crate) fn run_process(req: &ProcessRequest) -> Result<ProcessOutput, SandboxError> {
    let mut child = spawn(req)?;
    let stdout = capture(child.stdout.take().expect("stdout piped"), req.output_cap);
    let stderr = capture(child.stderr.take().expect("stderr piped"), req.output_cap);
    let feeder = match (req.stdin, child.stdin.take()) {
        (Some(data), Some(mut pipe)) => {
            let data = data.to_vec();
            // Broken pipes are expected when the program ignores its input.
            Some(thread::spawn(move || {
                let _ = pipe.write_all(&data);
            }))
        }
        _ => None,
    };

    let waited = child
        .wait_timeout(req.timeout)
        .map_err(|e| SandboxError::Environment(format!("wait failed: {e}")))?;
    let (status, timed_out) = match waited {
        Some(status) => {
            // Reap stragglers that kept the pipes open.
            kill_group(&child);
            (Some(status), false)
        }
        None => {
            kill_group(&child);
            let status = child.wait().ok();
            (status, true)
        }
    };
    if let Some(feeder) = feeder {
        let _ = feeder.join();
    }
    Ok(ProcessOutput {
        status,
        stdout: stdout.join().unwrap_or_default(),
        stderr: stderr.join().unwrap_or_default(),
        timed_out,
    })
}
