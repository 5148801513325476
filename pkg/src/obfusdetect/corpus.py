"""Execution-log records, JSONL corpus I/O and the synthetic benign corpus.

The synthetic corpus stands in for endpoint telemetry: templated, mundane
command lines for the five LOLBins (PowerShell, cmd, msiexec, rundll32,
explorer) with realistic paths, switches, GUIDs, IPs, URLs and numbers.
"""

from __future__ import annotations

import enum
import json
import random
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

__all__ = [
    "Label",
    "ExecutionLog",
    "read_jsonl",
    "write_jsonl",
    "iter_logs",
    "write_logs",
    "synth_corpus",
    "BINARIES",
    "Category",
    "LabeledDetection",
]


class Label(str, enum.Enum):
    BENIGN = "benign"
    OBFUSCATED = "obfuscated"


class Category(str, enum.Enum):
    """Analyst verdict on a detection."""

    OBFUSCATED_MALICIOUS = "obfuscated_malicious"
    OBFUSCATED_BENIGN = "obfuscated_benign"
    NON_OBFUSCATED = "non_obfuscated"


@dataclass
class LabeledDetection:
    log_ref: str
    raw: str
    probability: float
    category: Category | None = None

    def __post_init__(self):
        if self.category is not None and not isinstance(self.category, Category):
            self.category = Category(self.category)


_KNOWN_FIELDS = ("raw", "source_id", "label", "technique", "split")


@dataclass
class ExecutionLog:
    raw: str
    source_id: str = ""
    label: Label | None = None
    technique: str | None = None
    split: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.raw, (bytes, bytearray)):
            self.raw = bytes(self.raw).decode("utf-8", errors="replace")
        if self.label is not None and not isinstance(self.label, Label):
            self.label = Label(self.label)
        if self.technique is not None and self.label is None:
            raise ValueError("a technique tag requires a label")

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = dict(self.extra)
        rec["raw"] = self.raw
        rec["source_id"] = self.source_id
        if self.label is not None:
            rec["label"] = self.label.value
        if self.technique is not None:
            rec["technique"] = self.technique
        if self.split is not None:
            rec["split"] = self.split
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "ExecutionLog":
        if "raw" not in rec:
            raise ValueError("record has no 'raw' field")
        extra = {k: v for k, v in rec.items() if k not in _KNOWN_FIELDS}
        return cls(
            raw=rec["raw"],
            source_id=str(rec.get("source_id", "")),
            label=rec.get("label"),
            technique=rec.get("technique"),
            split=rec.get("split"),
            extra=extra,
        )


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False))
            fh.write("\n")
            n += 1
    return n


def iter_logs(path: str | Path) -> Iterator[ExecutionLog]:
    for rec in read_jsonl(path):
        yield ExecutionLog.from_record(rec)


def write_logs(path: str | Path, logs: Iterable[ExecutionLog]) -> int:
    return write_jsonl(path, (log.to_record() for log in logs))


# --------------------------------------------------------------------------
# synthetic benign corpus

BINARIES = ("powershell", "cmd", "msiexec", "rundll32", "explorer")

_USERS = [
    "jsmith", "adm-kovar", "mnovak", "Administrator", "svc_backup", "lab01", "student",
    "jdoe", "a.garcia", "petra.h", "build", "helpdesk", "kwilliams", "t.nguyen", "ops",
]
_WORDS = [
    "report", "invoice", "budget", "setup", "update", "install", "config", "backup", "notes",
    "data", "export", "summary", "meeting", "draft", "final", "archive", "logs", "scan",
    "printer", "driver", "payroll", "sales", "inventory", "project", "release", "test",
    "client", "server", "monitor", "sync", "cache", "session", "profile", "policy", "audit",
    "deploy", "migration", "schema", "template", "photos", "scripts", "tools", "agent",
    "service", "daily", "weekly", "monthly", "quarterly", "customer", "contract", "design",
]
_EXTS = ["txt", "log", "csv", "xlsx", "docx", "pdf", "json", "xml", "ini", "zip", "ps1", "bat", "cmd"]
_DIRS = [
    r"C:\Windows\System32", r"C:\Windows\Temp", r"C:\ProgramData", r"C:\Program Files",
    r"C:\Program Files (x86)", r"C:\Users\{user}\AppData\Local\Temp", r"C:\Users\{user}\Documents",
    r"C:\Users\{user}\Downloads", r"C:\Users\{user}\Desktop", r"D:\Shares\{word}", r"C:\Scripts",
    r"C:\Windows\SysWOW64", r"C:\Users\{user}\AppData\Roaming\{Word}", r"E:\Backup\{word}",
]
_VENDORS = ["Microsoft", "Adobe", "Google", "Mozilla", "Zoom", "Dell", "HP", "Lenovo", "Cisco", "VMware", "Citrix", "Oracle"]
_PRODUCTS = ["Agent", "Updater", "Client", "Reader", "Tools", "Helper", "Service", "Connector", "Sync", "Viewer"]
_SERVICES = ["wuauserv", "Spooler", "BITS", "WinRM", "W32Time", "Dnscache", "LanmanServer", "EventLog", "Schedule", "TermService"]
_DLLS = [
    ("shell32.dll", ["Control_RunDLL", "OpenAs_RunDLL", "ShellExec_RunDLL"]),
    ("printui.dll", ["PrintUIEntry"]),
    ("advpack.dll", ["LaunchINFSection", "RegisterOCX"]),
    ("setupapi.dll", ["InstallHinfSection"]),
    ("user32.dll", ["LockWorkStation", "UpdatePerUserSystemParameters"]),
    ("keymgr.dll", ["KRShowKeyMgr"]),
    ("ndfapi.dll", ["NdfRunDllDiagnoseIncident"]),
    ("syssetup.dll", ["SetupInfObjectInstallAction"]),
    ("dfshim.dll", ["ShOpenVerbApplication"]),
    ("inetcpl.cpl", ["ClearMyTracksByProcess"]),
    ("pcwutl.dll", ["LaunchApplication"]),
    ("appwiz.cpl", ["NewLinkHere"]),
]
_CMDLETS = [
    "Get-Process", "Get-Service", "Get-ChildItem", "Get-Content", "Get-ItemProperty", "Test-Path",
    "Get-WmiObject", "Get-CimInstance", "Get-EventLog", "Get-NetAdapter", "Get-Date", "Get-Volume",
    "Set-ExecutionPolicy", "Start-Service", "Stop-Service", "Restart-Service", "Copy-Item", "Remove-Item",
    "New-Item", "Import-Module", "Get-HotFix", "Test-NetConnection", "Resolve-DnsName", "Get-Disk",
]
_DOMAINS = ["contoso.com", "fabrikam.local", "update.example.org", "intranet.corp", "cdn.vendor.net", "files.example.com"]
_DRIVES = ["USB Drive", "Removable Disk", "KINGSTON", "SanDisk", "My Passport", "BACKUP", "Transcend", "DATA"]


class _Gen:
    def __init__(self, rng: random.Random):
        self.r = rng

    def pick(self, seq):
        return self.r.choice(seq)

    def word(self) -> str:
        return self.pick(_WORDS)

    def user(self) -> str:
        return self.pick(_USERS)

    def guid(self) -> str:
        return str(uuid.UUID(int=self.r.getrandbits(128))).upper()

    def ip(self) -> str:
        if self.r.random() < 0.5:
            return f"10.{self.r.randint(0, 255)}.{self.r.randint(0, 255)}.{self.r.randint(1, 254)}"
        return f"192.168.{self.r.randint(0, 255)}.{self.r.randint(1, 254)}"

    def date(self) -> str:
        y, m, d = self.r.randint(2015, 2024), self.r.randint(1, 12), self.r.randint(1, 28)
        return self.pick([f"{y}-{m:02d}-{d:02d}", f"{y}{m:02d}{d:02d}", f"{d:02d}.{m:02d}.{y}"])

    def directory(self) -> str:
        return self.pick(_DIRS).format(user=self.user(), word=self.word(), Word=self.word().title())

    def filename(self, ext: str | None = None) -> str:
        stem = self.word()
        roll = self.r.random()
        if roll < 0.3:
            stem += "_" + self.word()
        elif roll < 0.5:
            stem += f"_{self.date()}"
        elif roll < 0.65:
            stem += str(self.r.randint(1, 99))
        return f"{stem}.{ext or self.pick(_EXTS)}"

    def path(self, ext: str | None = None) -> str:
        return self.directory() + "\\" + self.filename(ext)

    def url(self) -> str:
        scheme = self.pick(["https", "https", "http"])
        host = self.pick(_DOMAINS) if self.r.random() < 0.8 else self.ip()
        return f"{scheme}://{host}/{self.word()}/{self.filename(self.pick(['msi', 'zip', 'ps1', 'exe', 'json']))}"

    def quoted_path(self, ext: str | None = None) -> str:
        p = self.path(ext)
        return f'"{p}"' if " " in p or self.r.random() < 0.3 else p


def _powershell(g: _Gen) -> str:
    exe = g.pick([
        "powershell.exe", "powershell", r"C:\Windows\System32\WindowsPowerShell\v1.0\powershell.exe",
        "PowerShell.exe", "pwsh.exe",
    ])
    pre = g.pick(["", "-NoProfile ", "-NoLogo -NonInteractive ", "-ExecutionPolicy Bypass ", "-NoProfile -ExecutionPolicy RemoteSigned "])
    cmdlet = g.pick(_CMDLETS)
    forms = [
        lambda: f"{cmdlet} -Name {g.pick(_SERVICES)}",
        lambda: f"Get-ChildItem -Path '{g.directory()}' -Filter *.{g.pick(_EXTS)} -Recurse",
        lambda: f"Get-Content '{g.path('log')}' -Tail {g.r.randint(10, 500)}",
        lambda: f"Test-Path '{g.path()}'",
        lambda: f"Copy-Item '{g.path()}' -Destination '{g.directory()}' -Force",
        lambda: f"Remove-Item -Path '{g.path()}' -Force -ErrorAction SilentlyContinue",
        lambda: f"Get-WmiObject -Class Win32_{g.pick(['OperatingSystem', 'LogicalDisk', 'Processor', 'Product', 'Service'])}",
        lambda: f"Get-ItemProperty -Path 'HKLM:\\SOFTWARE\\{g.pick(_VENDORS)}\\{g.pick(_PRODUCTS)}' -Name Version",
        lambda: f"Invoke-WebRequest -Uri '{g.url()}' -OutFile '{g.path()}' -UseBasicParsing",
        lambda: f"Test-NetConnection -ComputerName {g.ip()} -Port {g.pick([80, 443, 445, 3389, 5985, 8080])}",
        lambda: f"Start-Process -FilePath '{g.path('exe')}' -ArgumentList '/quiet' -Wait",
        lambda: f"& '{g.path('ps1')}' -Mode {g.pick(['Full', 'Quick', 'Repair'])}",
        lambda: f"Import-Module {g.pick(_VENDORS)}.{g.pick(_PRODUCTS)}; Get-{g.pick(_PRODUCTS)}Status",
        lambda: f"Get-Process | Where-Object {{$_.CPU -gt {g.r.randint(10, 200)}}} | Select-Object Name, Id",
        lambda: f"Get-EventLog -LogName {g.pick(['System', 'Application', 'Security'])} -Newest {g.r.randint(5, 100)}",
        lambda: f"Write-Output \"Backup of {g.word()} finished\"",
        lambda: f"$path = '{g.path()}'; if (Test-Path $path) {{ Remove-Item $path }}",
        lambda: f"Set-ExecutionPolicy -Scope Process -ExecutionPolicy {g.pick(['Bypass', 'RemoteSigned'])}",
        lambda: f"Get-Service -Name '{g.pick(_SERVICES)}' | Restart-Service -Force",
        lambda: f"New-Item -ItemType Directory -Path '{g.directory()}\\{g.word()}' -Force",
        lambda: f"Get-CimInstance Win32_LogicalDisk | Select-Object DeviceID, FreeSpace",
        lambda: f"Resolve-DnsName {g.pick(_DOMAINS)} -Type A",
        lambda: f"Get-ChildItem Env:; Get-Date -Format 'yyyy-MM-dd'",
    ]
    body = g.pick(forms)()
    if g.r.random() < 0.5:
        flag = g.pick(["-Command", "-c", "-command", "-C"])
        if "'" not in body and g.r.random() < 0.4:
            return f'{exe} {pre}{flag} "{body}"'
        return f"{exe} {pre}{flag} {body}"
    if g.r.random() < 0.3:
        return f"{exe} {pre}-File {g.quoted_path('ps1')}"
    return f"{exe} {pre}{body}"


def _cmd(g: _Gen) -> str:
    exe = g.pick(["cmd.exe", "cmd", r"C:\Windows\system32\cmd.exe", r"C:\WINDOWS\system32\cmd.exe", "CMD.EXE"])
    sw = g.pick(["/c", "/c", "/C", "/d /c", "/k", "/q /c"])
    forms = [
        lambda: f"dir {g.quoted_path()}",
        lambda: f"dir /s /b {g.directory()}\\*.{g.pick(_EXTS)}",
        lambda: f"copy /y {g.quoted_path()} {g.directory()}",
        lambda: f"del /f /q {g.quoted_path()}",
        lambda: f"tasklist /fi \"imagename eq {g.word()}.exe\"",
        lambda: f"tasklist.exe /fi imagename eq logonui* /fi session eq {g.r.randint(1, 20)},{g.r.randint(100, 999)}",
        lambda: f"ping {g.ip()} -n {g.r.randint(1, 10)}",
        lambda: f"ipconfig /{g.pick(['all', 'flushdns', 'renew', 'release'])}",
        lambda: f"net use {g.pick('FGHIJKLMNOPQRSTUVWXYZ')}: \\\\{g.word()}-srv\\{g.word()} /persistent:no",
        lambda: f"net {g.pick(['start', 'stop'])} {g.pick(_SERVICES)}",
        lambda: f"sc query {g.pick(_SERVICES)}",
        lambda: f"echo {g.word()} {g.word()} >> {g.path('log')}",
        lambda: f"mkdir {g.directory()}\\{g.word()}",
        lambda: f"type {g.quoted_path()}",
        lambda: f"xcopy {g.directory()} {g.directory()} /e /i /y",
        lambda: f"robocopy {g.directory()} {g.directory()} /MIR /R:{g.r.randint(1, 5)} /W:{g.r.randint(1, 30)}",
        lambda: f"{g.path('bat')}",
        lambda: f"\"{g.path('bat')}\" {g.word()}",
        lambda: f"reg query HKLM\\SOFTWARE\\{g.pick(_VENDORS)}\\{g.pick(_PRODUCTS)} /v Version",
        lambda: f"schtasks /query /tn \"{g.pick(_VENDORS)}\\{g.word()}\"",
        lambda: f"wmic logicaldisk get size,freespace,caption",
        lambda: f"whoami /groups",
        lambda: f"netstat -ano | findstr :{g.pick([80, 443, 445, 3389, 8080])}",
        lambda: f"set PATH=%PATH%;{g.directory()} && {g.word()}.exe",
        lambda: f"cd /d {g.directory()} && {g.word()}.cmd",
        lambda: f"C:\\WINDOWS\\TEMP\\{{{g.guid()}}}.bat",
        lambda: f"timeout /t {g.r.randint(1, 60)} /nobreak",
        lambda: f"gpupdate /force",
        lambda: f"npm run {g.pick(['build', 'test', 'lint'])}",
        lambda: f"git pull origin {g.pick(['main', 'master', 'develop'])}",
    ]
    return f"{exe} {sw} {g.pick(forms)()}"


def _msiexec(g: _Gen) -> str:
    exe = g.pick(["msiexec.exe", "msiexec", r"C:\Windows\System32\msiexec.exe", r"C:\Windows\SysWOW64\msiexec.exe", "MsiExec.exe"])
    forms = [
        lambda: f"/i {g.quoted_path('msi')} /qn /norestart",
        lambda: f"/i \"{g.directory()}\\{g.pick(_VENDORS)}{g.pick(_PRODUCTS)}.msi\" /quiet",
        lambda: f"/x {{{g.guid()}}} /qn",
        lambda: f"/X{{{g.guid()}}}",
        lambda: f"/i {g.url().rsplit('.', 1)[0]}.msi /qn",
        lambda: f"-Embedding {g.guid().replace('-', '')[:32]} C",
        lambda: f"/fa {{{g.guid()}}}",
        lambda: f"/i {g.quoted_path('msi')} /l*v {g.path('log')} ALLUSERS=1",
        lambda: f"/update {g.quoted_path('msp')} /quiet",
        lambda: f"/V",
        lambda: f"/i {g.quoted_path('msi')} TRANSFORMS={g.word()}.mst /passive",
    ]
    return f"{exe} {g.pick(forms)()}"


def _rundll32(g: _Gen) -> str:
    exe = g.pick(["rundll32.exe", "rundll32", r"C:\Windows\System32\rundll32.exe", r"C:\Windows\SysWOW64\rundll32.exe", "RunDll32.exe"])
    dll, entries = g.pick(_DLLS)
    forms = [
        lambda: f"{dll},{g.pick(entries)}",
        lambda: f"{dll},{g.pick(entries)} {g.r.randint(0, 64)}",
        lambda: "C:\\Windows\\System32\\" + f"{dll},{g.pick(entries)}",
        lambda: f"\"{g.directory()}\\{g.pick(_VENDORS)}{g.pick(_PRODUCTS)}.dll\",{g.pick(['DllRegisterServer', 'Start', 'Run', 'Init'])}",
        lambda: f"{g.directory()}\\{g.word()}{g.pick(_PRODUCTS)}.dll,{g.pick(['DllRegisterServer', 'Start', 'EntryPoint'])} {g.word()}",
        lambda: f"shell32.dll,Control_RunDLL {g.pick(['desk.cpl', 'timedate.cpl', 'ncpa.cpl', 'mmsys.cpl', 'sysdm.cpl'])}",
        lambda: f"printui.dll,PrintUIEntry /in /n \\\\{g.word()}-srv\\{g.word()}",
        lambda: f"{dll},{g.pick(entries)} {{{g.guid()}}}",
    ]
    return f"{exe} {g.pick(forms)()}"


def _explorer(g: _Gen) -> str:
    exe = g.pick(["explorer.exe", "explorer", r"C:\Windows\explorer.exe", "Explorer.EXE"])
    forms = [
        lambda: "",
        lambda: f"{g.directory()}",
        lambda: f"\"{g.directory()}\"",
        lambda: f"/select,\"{g.path()}\"",
        lambda: f"/e,{g.directory()}",
        lambda: f"shell:::{{{g.guid()}}}",
        lambda: f"{g.pick('DEFGH')}:\\",
        lambda: f"\"{g.pick(_DRIVES)} ({g.pick('DEFGH')}:)\"",
        lambda: f"{g.url()}",
        lambda: f"/factory,{{{g.guid()}}} -Embedding",
    ]
    body = g.pick(forms)()
    return f"{exe} {body}" if body else exe


_MAKERS = {
    "powershell": _powershell,
    "cmd": _cmd,
    "msiexec": _msiexec,
    "rundll32": _rundll32,
    "explorer": _explorer,
}
_WEIGHTS = {"powershell": 0.3, "cmd": 0.3, "msiexec": 0.14, "rundll32": 0.14, "explorer": 0.12}


def synth_corpus(seed: int, n: int) -> list[ExecutionLog]:
    """Generate ``n`` benign execution logs deterministically from ``seed``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = random.Random(seed)
    g = _Gen(rng)
    names = list(_MAKERS)
    weights = [_WEIGHTS[k] for k in names]
    logs = []
    for i in range(n):
        # round-robin for the first five so every binary is present in small corpora
        kind = names[i] if i < len(names) else rng.choices(names, weights)[0]
        logs.append(ExecutionLog(raw=_MAKERS[kind](g), source_id=f"synth-{seed}-{i}", label=Label.BENIGN))
    return logs
