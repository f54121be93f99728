use std::path::PathBuf;
use std::process::{Command, Output};

use spw_control::{api, run_cli, Backend, ControlService, RemoteBackend, SimHandle, BRING_UP_TICKS};
use spw_core::testbed::TestbedConfig;

fn run(backend: &mut dyn Backend, line: &str) -> (i32, String, String) {
    let args: Vec<String> = line.split_whitespace().map(str::to_string).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_cli(backend, &args, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn brought_up() -> ControlService {
    let mut svc = ControlService::new(TestbedConfig::default()).unwrap();
    svc.bring_up(BRING_UP_TICKS).unwrap();
    svc
}

/// Feeds `script` line by line and returns everything printed, stderr lines
/// prefixed with `!`.
fn transcript(backend: &mut dyn Backend, script: &str) -> String {
    let mut all = String::new();
    for line in script.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (code, out, err) = run(backend, line);
        all.push_str(&format!("> {line}\n{out}"));
        for e in err.lines() {
            all.push_str(&format!("! {e}\n"));
        }
        if code != 0 {
            all.push_str(&format!("exit {code}\n"));
        }
    }
    all
}

const SCRIPT: &str = "
    bar0
    read --offset 100 --len 4
    write --offset 100 --data 2222
    read --offset 100 --len 4
    read --offset 100 --len 2
    discover
    link reset 1
    discover
    tick 5
    discover
    inject -1000 0 5
    tick 20
    acquire
    read --offset 101 --len 4
    link enable 7
";

const EXPECTED: &str = "\
> bar0
bar0 address:0xD2100000
> read --offset 100 --len 4
read data:0
datasize:4
> write --offset 100 --data 2222
write data:2222
datasize:4
> read --offset 100 --len 4
read data:2222
datasize:4
> read --offset 100 --len 2
read data:2222
datasize:2
> discover
port status:0x05(101B)
> link reset 1
link 1 reset
> discover
port status:0x04(100B)
> tick 5
tick:10
> discover
port status:0x05(101B)
> inject -1000 0 5
inject x:-1000 y:0 z:5
> tick 20
tick:30
> acquire
sample x:0 y:0 z:0
sample x:-1000 y:0 z:5
datasize:32
> read --offset 101 --len 4
! error: STATUS_INVALID_PARAMETER
exit 1
> link enable 7
! error: STATUS_INVALID_PARAMETER
exit 1
";

#[test]
fn local_transcript() {
    assert_eq!(transcript(&mut brought_up(), SCRIPT), EXPECTED);
}

#[test]
fn usage_errors_exit_2() {
    let mut svc = brought_up();
    for line in ["read --offset ZZZ", "read", "frobnicate", "write --offset 100", "inject 1 2", "write --offset 100 --data 300 --len 1"] {
        let (code, out, err) = run(&mut svc, line);
        assert_eq!(code, 2, "{line}: {out}{err}");
        assert!(!err.is_empty(), "{line}");
    }
    assert!(svc.trace().iter().all(|r| r.ctl_code != 0x8000_2008), "nothing was written");
}

#[test]
fn bad_length_exits_1_without_dispatch() {
    let mut svc = brought_up();
    let before = svc.trace().len();
    let (code, _, err) = run(&mut svc, "read --offset 100 --len 3");
    assert_eq!(code, 1);
    assert_eq!(err.trim(), "error: STATUS_INVALID_PARAMETER");
    assert_eq!(svc.trace().len(), before);
}

#[test]
fn help_exits_0() {
    let (code, out, _) = run(&mut brought_up(), "--help");
    assert_eq!(code, 0);
    assert!(out.contains("discover"));
}

#[test]
fn ticks_flag_runs_first() {
    let mut svc = brought_up();
    let (code, out, _) = run(&mut svc, "--ticks 100 acquire --max-bytes 32");
    assert_eq!(code, 0);
    assert!(out.ends_with("datasize:32\n"), "{out}");
    assert_eq!(svc.now(), 105);
}

#[test]
fn remote_transcript_matches_local() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let sim = SimHandle::spawn_with(TestbedConfig::default(), None, |svc| svc.bring_up(BRING_UP_TICKS)).unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(api::serve(listener, sim));
    let mut remote = RemoteBackend::new(&format!("http://{addr}/"));
    let got = transcript(&mut remote, SCRIPT);
    // The API checks ports itself and says so in its own words.
    let expected = EXPECTED.replace(
        "> link enable 7\n! error: STATUS_INVALID_PARAMETER",
        "> link enable 7\n! error: no router port 7",
    );
    assert_eq!(got, expected);
}

// The binary itself: config from a file, one-shot commands.

fn spwctl(args: &[&str], config: Option<&PathBuf>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spwctl"));
    cmd.args(args).env_remove("SPW_CONFIG");
    if let Some(path) = config {
        cmd.env("SPW_CONFIG", path);
    }
    cmd.output().unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn config_file(name: &str, body: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("spwctl-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn binary_one_shot_commands() {
    let cfg = config_file("base.conf", "bar0_base=0xD2100000\n");
    let o = spwctl(&["bar0"], Some(&cfg));
    assert!(o.status.success());
    assert_eq!(text(&o), "bar0 address:0xD2100000\n");

    let o = spwctl(&["discover"], None);
    assert_eq!(text(&o), "port status:0x05(101B)\n");
    let o = spwctl(&["--cold", "discover"], None);
    assert_eq!(text(&o), "port status:0x00(0B)\n");

    let o = spwctl(&["read", "--offset", "ZZZ"], None);
    assert_eq!(o.status.code(), Some(2));
    let o = spwctl(&["read", "--offset", "101"], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn binary_honours_config() {
    let cfg = config_file("moved.conf", "bar0_base=0xE0000000\nbar2_base=0xE0100000\n");
    let o = spwctl(&["bar0"], Some(&cfg));
    assert_eq!(text(&o), "bar0 address:0xE0000000\n");
    let o = spwctl(&["--config", cfg.to_str().unwrap(), "bar0"], None);
    assert_eq!(text(&o), "bar0 address:0xE0000000\n");

    let bad = config_file("bad.conf", "bar0_base=banana\n");
    let o = spwctl(&["bar0"], Some(&bad));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bar0_base"));
}

#[test]
fn binary_shell_keeps_state() {
    use std::io::Write;
    use std::process::Stdio;
    let mut child = Command::new(env!("CARGO_BIN_EXE_spwctl"))
        .arg("shell")
        .env_remove("SPW_CONFIG")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"# scratch\nwrite --offset 100 --data 2222\nread --offset 100\nexit\nread --offset 0\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(text(&o), "write data:2222\ndatasize:4\nread data:2222\ndatasize:4\n");
}
