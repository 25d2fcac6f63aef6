mod mbox;

use std::error::Error;
use std::io::{self, BufRead, IsTerminal};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chamail_core::credstore::{
    AccountRecord, CredStore, KdfParams, ListAction, Principal, SubUserRecord, UpstreamSpec,
};
use chamail_core::policy::{
    self, Decision, KeywordConstraint, KeywordMode, PolicySet, Sender, SenderConstraint,
    SenderMode,
};
use chamail_core::proxy::{Proxy, ProxyConfig, DEFAULT_LISTEN};
use chamail_core::store::{self, MasterKey, StoreLock};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use zeroize::Zeroizing;

type Result<T, E = Box<dyn Error>> = std::result::Result<T, E>;

/// Administer a chamail store and run the proxy.
///
/// Passwords are never taken as arguments. They are prompted for on the
/// terminal, or read one per line from standard input with
/// --password-stdin. The master key is read from CHAMAIL_MASTER_KEY.
#[derive(Parser)]
#[command(name = "chamail", version)]
struct Cli {
    /// Path of the credential store.
    #[arg(long, global = true, env = "CHAMAIL_STORE", default_value = "chamail-store.json")]
    store: PathBuf,

    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    noun: Noun,
}

#[derive(Subcommand)]
enum Noun {
    /// Create, delete and inspect accounts.
    #[command(subcommand)]
    Account(AccountCmd),
    /// Manage the extra passwords of an account.
    #[command(subcommand)]
    Subuser(SubuserCmd),
    /// Manage named address lists used by sender rules.
    #[command(subcommand)]
    List(ListCmd),
    /// Set, show and test visibility rules.
    #[command(subcommand)]
    Rule(RuleCmd),
    /// Run the proxy.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum AccountCmd {
    /// Create an account. Reads the owner password, then the upstream password.
    Create {
        email: String,
        #[command(flatten)]
        upstream: UpstreamArgs,
        #[arg(long)]
        password_stdin: bool,
    },
    Delete {
        email: String,
    },
    /// Replace the upstream server settings. Reads the upstream password.
    SetUpstream {
        email: String,
        #[command(flatten)]
        upstream: UpstreamArgs,
        #[arg(long)]
        password_stdin: bool,
    },
    Show {
        email: String,
    },
    List,
}

#[derive(Args)]
struct UpstreamArgs {
    /// Upstream IMAP host.
    #[arg(long)]
    host: String,
    #[arg(long, default_value_t = 993)]
    port: u16,
    /// Connect to the upstream server without TLS.
    #[arg(long)]
    no_tls: bool,
    /// Upstream login name; defaults to the account address.
    #[arg(long)]
    login: Option<String>,
}

#[derive(Subcommand)]
enum SubuserCmd {
    /// Add a sub-user. Reads the sub-user's password.
    Add {
        email: String,
        name: String,
        #[arg(long)]
        password_stdin: bool,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    Remove {
        email: String,
        name: String,
    },
    List {
        email: String,
    },
}

#[derive(Subcommand)]
enum ListCmd {
    Create { email: String, list: String },
    Delete { email: String, list: String },
    Add {
        email: String,
        list: String,
        #[arg(required = true)]
        addresses: Vec<String>,
    },
    Remove {
        email: String,
        list: String,
        #[arg(required = true)]
        addresses: Vec<String>,
    },
    Show { email: String, list: String },
}

#[derive(Subcommand)]
enum RuleCmd {
    /// Replace a sub-user's policy.
    Set {
        email: String,
        name: String,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Clear every constraint, letting the sub-user see all mail.
        #[arg(long, conflicts_with_all = ["senders", "require_any", "forbid_any"])]
        none: bool,
    },
    Show {
        email: String,
        name: String,
    },
    /// Report which messages of an mbox file a principal would see.
    Dryrun {
        email: String,
        mbox: PathBuf,
        /// Sub-user to evaluate as; the owner when omitted.
        #[arg(long = "as")]
        as_name: Option<String>,
    },
}

#[derive(Args)]
struct PolicyArgs {
    /// Sender rule as blacklist:LIST or whitelist:LIST. Repeatable.
    #[arg(long, value_name = "MODE:LIST")]
    senders: Vec<String>,
    /// Show only mail mentioning one of these comma-separated keywords. Repeatable.
    #[arg(long, value_name = "KW,...")]
    require_any: Vec<String>,
    /// Hide mail mentioning any of these comma-separated keywords. Repeatable.
    #[arg(long, value_name = "KW,...")]
    forbid_any: Vec<String>,
}

impl PolicyArgs {
    fn is_empty(&self) -> bool {
        self.senders.is_empty() && self.require_any.is_empty() && self.forbid_any.is_empty()
    }

    fn build(&self) -> Result<PolicySet> {
        let mut set = PolicySet::default();
        for s in &self.senders {
            let (mode, list) = s
                .split_once(':')
                .ok_or_else(|| format!("sender rule {s:?} is not MODE:LIST"))?;
            let mode = match mode {
                "blacklist" => SenderMode::Blacklist,
                "whitelist" => SenderMode::Whitelist,
                _ => return Err(format!("unknown sender mode {mode:?}").into()),
            };
            set.sender_constraints.push(SenderConstraint { mode, list: list.to_string() });
        }
        for (mode, groups) in [
            (KeywordMode::RequireAny, &self.require_any),
            (KeywordMode::ForbidAny, &self.forbid_any),
        ] {
            for group in groups {
                let words = group.split(',').map(str::trim).filter(|w| !w.is_empty());
                set.keyword_constraints.push(KeywordConstraint::new(mode, words)?);
            }
        }
        Ok(set)
    }
}

#[derive(Args)]
struct ServeArgs {
    /// Proxy configuration file. Without one, listens on --listen using --store.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    listen: Option<SocketAddr>,
    /// Log more; repeat for trace output.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("chamail: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = Output { json: cli.json };
    let path = cli.store.as_path();
    match cli.noun {
        Noun::Account(cmd) => account(cmd, path, &out),
        Noun::Subuser(cmd) => subuser(cmd, path, &out),
        Noun::List(cmd) => list(cmd, path, &out),
        Noun::Rule(cmd) => rule(cmd, path, &out),
        Noun::Serve(args) => serve(args, path),
    }
}

struct Output {
    json: bool,
}

impl Output {
    fn emit(&self, value: serde_json::Value, text: impl FnOnce() -> Vec<String>) {
        if self.json {
            println!("{value}");
        } else {
            for line in text() {
                println!("{line}");
            }
        }
    }

    fn done(&self, what: String) {
        self.emit(json!({"ok": true, "message": what}), || vec![what.clone()]);
    }
}

/// Holds the store lock for the lifetime of a mutation.
struct Locked {
    store: CredStore,
    _lock: StoreLock,
}

fn lock(path: &Path) -> Result<Locked> {
    let lock = StoreLock::exclusive(path).map_err(|e| format!("cannot lock {}: {e}", path.display()))?;
    let store = CredStore::open(path, KdfParams::RECOMMENDED)?;
    Ok(Locked { store, _lock: lock })
}

fn read_only(path: &Path) -> Result<CredStore> {
    Ok(CredStore::open(path, KdfParams::RECOMMENDED)?)
}

fn master_key() -> Result<MasterKey> {
    Ok(MasterKey::from_env()?)
}

fn find_account<'a>(store: &'a CredStore, email: &str) -> Result<&'a AccountRecord> {
    store.account(email).ok_or_else(|| "no such account".into())
}

/// Source of secrets: lines of standard input, or the terminal.
struct Secrets {
    stdin: Option<io::Lines<io::StdinLock<'static>>>,
}

impl Secrets {
    fn new(from_stdin: bool) -> Self {
        Secrets { stdin: from_stdin.then(|| io::stdin().lock().lines()) }
    }

    fn read(&mut self, prompt: &str, confirm: bool) -> Result<Zeroizing<String>> {
        match self.stdin.as_mut() {
            Some(lines) => {
                let line = lines.next().ok_or("expected a password on standard input")??;
                let line = Zeroizing::new(line);
                Ok(Zeroizing::new(line.trim_end_matches('\r').to_string()))
            }
            None => {
                let first = Zeroizing::new(rpassword::prompt_password(format!("{prompt}: "))?);
                if confirm {
                    let again = Zeroizing::new(rpassword::prompt_password(format!("{prompt} (again): "))?);
                    if *first != *again {
                        return Err("passwords do not match".into());
                    }
                }
                Ok(first)
            }
        }
    }
}

fn upstream_spec(email: &str, args: &UpstreamArgs, password: Zeroizing<String>) -> UpstreamSpec {
    UpstreamSpec {
        host: args.host.clone(),
        port: args.port,
        use_tls: !args.no_tls,
        upstream_login: args.login.clone().unwrap_or_else(|| email.to_string()),
        password,
    }
}

fn upstream_json(a: &AccountRecord) -> serde_json::Value {
    json!({
        "host": a.upstream.host,
        "port": a.upstream.port,
        "tls": a.upstream.use_tls,
        "login": a.upstream.upstream_login,
    })
}

fn account(cmd: AccountCmd, path: &Path, out: &Output) -> Result<()> {
    match cmd {
        AccountCmd::Create { email, upstream, password_stdin } => {
            let key = master_key()?;
            let mut secrets = Secrets::new(password_stdin);
            let owner = secrets.read("Owner password", true)?;
            let up = secrets.read("Upstream password", false)?;
            let spec = upstream_spec(&email, &upstream, up);
            let mut l = lock(path)?;
            let rec = l.store.create_account(&email, &spec, &owner, &key)?;
            out.done(format!("created account {}", rec.email.as_str()));
        }
        AccountCmd::Delete { email } => {
            lock(path)?.store.delete_account(&email)?;
            out.done(format!("deleted account {email}"));
        }
        AccountCmd::SetUpstream { email, upstream, password_stdin } => {
            let key = master_key()?;
            let up = Secrets::new(password_stdin).read("Upstream password", false)?;
            let spec = upstream_spec(&email, &upstream, up);
            let rec = lock(path)?.store.set_upstream(&email, &spec, &key)?;
            out.done(format!(
                "upstream for {} is {}:{}",
                rec.email.as_str(),
                rec.upstream.host,
                rec.upstream.port
            ));
        }
        AccountCmd::Show { email } => {
            let store = read_only(path)?;
            let a = find_account(&store, &email)?;
            let subusers: Vec<_> = a.subusers.iter().map(|s| s.name.as_str()).collect();
            let lists: Vec<_> = a.lists.iter().map(|l| l.name.as_str()).collect();
            out.emit(
                json!({
                    "email": a.email.as_str(),
                    "upstream": upstream_json(a),
                    "subusers": subusers,
                    "lists": lists,
                }),
                || {
                    vec![
                        format!("account   {}", a.email.as_str()),
                        format!(
                            "upstream  {}:{} {} as {}",
                            a.upstream.host,
                            a.upstream.port,
                            if a.upstream.use_tls { "tls" } else { "plain" },
                            a.upstream.upstream_login
                        ),
                        format!("subusers  {}", subusers.join(" ")),
                        format!("lists     {}", lists.join(" ")),
                    ]
                },
            );
        }
        AccountCmd::List => {
            let store = read_only(path)?;
            let emails: Vec<_> = store.state().accounts.iter().map(|a| a.email.as_str()).collect();
            out.emit(json!({ "accounts": emails }), || {
                emails.iter().map(|e| e.to_string()).collect()
            });
        }
    }
    Ok(())
}

fn subuser(cmd: SubuserCmd, path: &Path, out: &Output) -> Result<()> {
    match cmd {
        SubuserCmd::Add { email, name, password_stdin, policy } => {
            let policy = policy.build()?;
            let password = Secrets::new(password_stdin).read(&format!("Password for {name}"), true)?;
            let rec = lock(path)?.store.add_subuser(&email, &name, &password, policy)?;
            out.done(format!("added sub-user {} to {email}", rec.name));
        }
        SubuserCmd::Remove { email, name } => {
            lock(path)?.store.remove_subuser(&email, &name)?;
            out.done(format!("removed sub-user {name} from {email}"));
        }
        SubuserCmd::List { email } => {
            let store = read_only(path)?;
            let a = find_account(&store, &email)?;
            let records: Vec<_> = a.subusers.iter().map(subuser_json).collect();
            out.emit(json!({ "subusers": records }), || {
                a.subusers
                    .iter()
                    .map(|s| format!("{}\t{}", s.name, describe(&s.policy)))
                    .collect()
            });
        }
    }
    Ok(())
}

fn subuser_json(s: &SubUserRecord) -> serde_json::Value {
    json!({ "name": s.name, "readonly": s.readonly, "policy": s.policy })
}

/// One-line rendering of a policy in the same syntax the flags accept.
fn describe(p: &PolicySet) -> String {
    let mut parts = Vec::new();
    for c in &p.sender_constraints {
        let mode = match c.mode {
            SenderMode::Blacklist => "blacklist",
            SenderMode::Whitelist => "whitelist",
        };
        parts.push(format!("senders={mode}:{}", c.list));
    }
    for c in &p.keyword_constraints {
        let mode = match c.mode {
            KeywordMode::RequireAny => "require-any",
            KeywordMode::ForbidAny => "forbid-any",
        };
        let words: Vec<_> = c.keywords.iter().map(|k| k.as_str()).collect();
        parts.push(format!("{mode}={}", words.join(",")));
    }
    if parts.is_empty() {
        "(no constraints)".to_string()
    } else {
        parts.join(" ")
    }
}

fn list(cmd: ListCmd, path: &Path, out: &Output) -> Result<()> {
    match cmd {
        ListCmd::Create { email, list } => {
            lock(path)?.store.manage_list(&email, &list, ListAction::Create)?;
            out.done(format!("created list {list}"));
        }
        ListCmd::Delete { email, list } => {
            lock(path)?.store.manage_list(&email, &list, ListAction::Delete)?;
            out.done(format!("deleted list {list}"));
        }
        ListCmd::Add { email, list, addresses } => {
            let mut l = lock(path)?;
            for a in &addresses {
                l.store.manage_list(&email, &list, ListAction::AddMember(a.clone()))?;
            }
            out.done(format!("added {} address(es) to {list}", addresses.len()));
        }
        ListCmd::Remove { email, list, addresses } => {
            let mut l = lock(path)?;
            for a in &addresses {
                l.store.manage_list(&email, &list, ListAction::RemoveMember(a.clone()))?;
            }
            out.done(format!("removed {} address(es) from {list}", addresses.len()));
        }
        ListCmd::Show { email, list } => {
            let store = read_only(path)?;
            let l = find_account(&store, &email)?.list(&list).ok_or("no such list")?;
            let members: Vec<_> = l.members.iter().map(|m| m.as_str()).collect();
            out.emit(json!({ "name": l.name, "members": members }), || {
                members.iter().map(|m| m.to_string()).collect()
            });
        }
    }
    Ok(())
}

fn rule(cmd: RuleCmd, path: &Path, out: &Output) -> Result<()> {
    match cmd {
        RuleCmd::Set { email, name, policy, none } => {
            if policy.is_empty() && !none {
                return Err("give at least one of --senders, --require-any, --forbid-any, or --none".into());
            }
            let policy = policy.build()?;
            let rec = lock(path)?.store.set_policy(&email, &name, policy)?;
            out.done(format!("{}: {}", rec.name, describe(&rec.policy)));
        }
        RuleCmd::Show { email, name } => {
            let store = read_only(path)?;
            let s = find_account(&store, &email)?.subuser(&name).ok_or("no such sub-user")?;
            out.emit(subuser_json(s), || vec![describe(&s.policy)]);
        }
        RuleCmd::Dryrun { email, mbox, as_name } => dryrun(path, &email, &mbox, as_name, out)?,
    }
    Ok(())
}

fn dryrun(path: &Path, email: &str, mbox: &Path, as_name: Option<String>, out: &Output) -> Result<()> {
    let store = read_only(path)?;
    let acct = find_account(&store, email)?;
    let principal = match as_name {
        Some(name) => Principal::SubUser(name),
        None => Principal::Owner,
    };
    let empty = PolicySet::default();
    let policy = match &principal {
        Principal::Owner => &empty,
        Principal::SubUser(_) => acct.policy_for(&principal).ok_or("no such sub-user")?,
    };
    let data = std::fs::read(mbox).map_err(|e| format!("cannot read {}: {e}", mbox.display()))?;
    let (mut visible, mut hidden) = (0usize, 0usize);
    for (i, raw) in mbox::split(&data).iter().enumerate() {
        let meta = policy::extract_meta(raw);
        let decision = policy::evaluate(policy, &meta, &acct.lists, &principal);
        let sender = match &meta.sender {
            Sender::Address(a) => a.as_str().to_string(),
            Sender::Unparseable => "(unparseable)".to_string(),
        };
        let word = match decision {
            Decision::Visible => {
                visible += 1;
                "VISIBLE"
            }
            Decision::Hidden => {
                hidden += 1;
                "HIDDEN"
            }
        };
        out.emit(
            json!({ "index": i + 1, "sender": sender, "decision": word }),
            || vec![format!("{}\t{sender}\t{word}", i + 1)],
        );
    }
    out.emit(json!({ "visible": visible, "hidden": hidden }), || {
        vec![format!("{visible} VISIBLE / {hidden} HIDDEN")]
    });
    Ok(())
}

fn serve(args: ServeArgs, store_path: &Path) -> Result<()> {
    let level = match args.verbose {
        0 => tracing::Level::INFO,
        1 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_ansi(io::stderr().is_terminal())
        .with_writer(io::stderr)
        .init();
    let key = master_key()?;
    let config = match &args.config {
        Some(p) => ProxyConfig::load(p)?,
        None => {
            let listen = match args.listen {
                Some(a) => a,
                None => DEFAULT_LISTEN.parse()?,
            };
            ProxyConfig::new(listen, store_path.to_path_buf())
        }
    };
    store::load(&config.store).map_err(|e| format!("cannot load {}: {e}", config.store.display()))?;
    Proxy::bind(config, key)?.run();
    Ok(())
}
