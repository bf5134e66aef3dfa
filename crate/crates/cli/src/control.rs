//! Local control channel between `wee stop` and a running `wee run`.
//!
//! The run process listens on a Unix socket at the `--control` path. A
//! client writes one line (`stop`) and reads one reply line. When the run
//! ends the socket is removed and `<path>.done` records how it ended, so a
//! late stop can tell a finished instance from one that never existed.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};

pub fn marker_path(control: &Path) -> PathBuf {
    let mut s = control.as_os_str().to_owned();
    s.push(".done");
    PathBuf::from(s)
}

pub struct ControlListener {
    path: PathBuf,
    listener: UnixListener,
}

impl ControlListener {
    pub fn bind(path: &Path) -> Result<Self> {
        let _ = std::fs::remove_file(marker_path(path));
        if path.exists() {
            if UnixStream::connect(path).is_ok() {
                bail!("another instance is listening on {}", path.display());
            }
            std::fs::remove_file(path).with_context(|| format!("removing stale socket {}", path.display()))?;
        }
        let listener = UnixListener::bind(path).with_context(|| format!("binding {}", path.display()))?;
        listener.set_nonblocking(true)?;
        Ok(ControlListener { path: path.to_owned(), listener })
    }

    /// Answers every pending request; `on_stop` produces the reply to a stop.
    pub fn poll(&self, mut on_stop: impl FnMut() -> String) {
        loop {
            let stream = match self.listener.accept() {
                Ok((s, _)) => s,
                Err(e) if e.kind() == ErrorKind::WouldBlock => return,
                Err(_) => return,
            };
            let _ = stream.set_nonblocking(false);
            let _ = stream.set_read_timeout(Some(Duration::from_secs(2)));
            let mut line = String::new();
            let mut reader = BufReader::new(&stream);
            if reader.read_line(&mut line).is_err() {
                continue;
            }
            let reply = match line.trim() {
                "stop" => on_stop(),
                other => format!("unknown command `{other}`"),
            };
            let _ = (&stream).write_all(format!("{reply}\n").as_bytes());
        }
    }

    /// Removes the socket and leaves the end marker behind.
    pub fn finish(self, outcome: &str) {
        let _ = std::fs::remove_file(&self.path);
        let _ = std::fs::write(marker_path(&self.path), format!("{outcome}\n"));
    }
}

pub enum StopReply {
    Delivered(String),
    AlreadyEnded(String),
}

pub fn send_stop(path: &Path) -> Result<StopReply> {
    match UnixStream::connect(path) {
        Ok(mut stream) => {
            stream.set_read_timeout(Some(Duration::from_secs(10)))?;
            stream.write_all(b"stop\n")?;
            let mut line = String::new();
            BufReader::new(&stream).read_line(&mut line).context("reading the controller reply")?;
            Ok(StopReply::Delivered(line.trim().to_owned()))
        }
        Err(e) => match std::fs::read_to_string(marker_path(path)) {
            Ok(outcome) => Ok(StopReply::AlreadyEnded(outcome.trim().to_owned())),
            Err(_) => bail!("no instance is running at {} ({e})", path.display()),
        },
    }
}
