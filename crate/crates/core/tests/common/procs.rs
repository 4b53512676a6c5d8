use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Output, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

pub const DMF: &str = env!("CARGO_BIN_EXE_dmf");

pub fn dmf(args: &[&str]) -> Command {
    let mut c = Command::new(DMF);
    c.args(args).env("DMF_LOG", "warn");
    c
}

/// Runs to completion, killing the child after `limit`.
pub fn run_with_limit(mut cmd: Command, limit: Duration) -> (Option<Output>, Duration) {
    let started = Instant::now();
    let child = cmd
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn dmf");
    let pid = child.id();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = tx.send(child.wait_with_output());
    });
    match rx.recv_timeout(limit) {
        Ok(out) => (Some(out.expect("wait for dmf")), started.elapsed()),
        Err(_) => {
            signal(pid, "KILL");
            (None, started.elapsed())
        }
    }
}

pub fn signal(pid: u32, name: &str) {
    let _ = Command::new("kill")
        .arg(format!("-{name}"))
        .arg(pid.to_string())
        .status();
}

/// A server process whose listening port was read off its first stdout line.
pub struct ServerProc {
    pub child: Child,
    pub port: u16,
    pub banner: String,
}

impl ServerProc {
    pub fn start(subcommand: &str, config: &Path) -> ServerProc {
        let mut child = dmf(&[subcommand, "--config", config.to_str().unwrap()])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn server");
        let stdout = child.stdout.take().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut lines = BufReader::new(stdout).lines();
            if let Some(Ok(first)) = lines.next() {
                let _ = tx.send(first);
            }
            for _ in lines {}
        });
        let banner = match rx.recv_timeout(Duration::from_secs(10)) {
            Ok(b) => b,
            Err(_) => {
                let _ = child.kill();
                panic!("{subcommand} printed no banner");
            }
        };
        let port = banner
            .split_whitespace()
            .find_map(|w| w.rsplit_once(':').and_then(|(_, p)| p.parse().ok()))
            .unwrap_or_else(|| panic!("no port in {banner:?}"));
        ServerProc {
            child,
            port,
            banner,
        }
    }

    /// SIGTERM, then wait up to ten seconds.
    pub fn terminate(mut self) -> Option<ExitStatus> {
        signal(self.child.id(), "TERM");
        let until = Instant::now() + Duration::from_secs(10);
        while Instant::now() < until {
            if let Ok(Some(s)) = self.child.try_wait() {
                return Some(s);
            }
            thread::sleep(Duration::from_millis(20));
        }
        let _ = self.child.kill();
        None
    }

    pub fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for ServerProc {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Transport file for `backend` on `port` (0 lets the server pick).
pub fn transport_file(dir: &Path, backend: &str, port: u16, extra: &str) -> PathBuf {
    write(
        dir,
        &format!("{backend}-{port}.conf"),
        &format!("transport.backend={backend}\ntransport.endpoint=127.0.0.1:{port}\n{extra}"),
    )
}

pub fn worker_file(dir: &Path, id: &str, transport: &Path) -> PathBuf {
    write(
        dir,
        &format!("{id}.conf"),
        &format!(
            "node.id={id}\nnode.role=worker\nnode.transport.config={}\n",
            transport.display()
        ),
    )
}

pub fn spawn_worker(config: &Path) -> Child {
    dmf(&["start-worker", "--config", config.to_str().unwrap()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .expect("spawn worker")
}

/// Waits for every child, killing stragglers after `limit`.
pub fn reap(children: Vec<Child>, limit: Duration) -> usize {
    let until = Instant::now() + limit;
    let mut clean = 0;
    for mut c in children {
        loop {
            match c.try_wait() {
                Ok(Some(s)) => {
                    clean += s.success() as usize;
                    break;
                }
                _ if Instant::now() >= until => {
                    let _ = c.kill();
                    let _ = c.wait();
                    break;
                }
                _ => thread::sleep(Duration::from_millis(20)),
            }
        }
    }
    clean
}
