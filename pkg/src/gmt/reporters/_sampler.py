"""Reporter child process.

Runs as a standalone script (``python -S _sampler.py key=value ...``) and
must only import cheap standard-library modules: interpreter startup and
every wakeup are part of the measured overhead. It samples one source every
``interval_us`` and appends ``<t_us>\\t<value>[\\t<detail>]`` lines to its
output file. Nothing is aggregated or sent anywhere while the run is going.

Stop protocol: the parent writes ``stop [<end_t_us>]`` to stdin, or closes
it. EOF on stdin also stops the child, so reporters never outlive a dead
orchestrator.

Exit codes: 0 stopped normally, 2 bad config, 3 metric unavailable.
"""
import os
import select
import sys
import time

EXIT_CONFIG = 2
EXIT_UNAVAILABLE = 3

_CLK_TCK = os.sysconf("SC_CLK_TCK")
_PAGE = os.sysconf("SC_PAGE_SIZE")
_BUF = 1 << 16


class Unavailable(Exception):
    pass


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def _open(path):
    try:
        return os.open(path, os.O_RDONLY)
    except OSError as exc:
        raise Unavailable("%s: %s" % (path, exc.strerror))


def _pread(fd, size=_BUF):
    # procfs/sysfs regenerate their content on every read from offset 0
    return os.pread(fd, size, 0)


class Source:
    def __init__(self, cfg):
        self.root = cfg.get("root", "/")
        self.options = cfg.get("options") or {}
        self._fds = []

    def p(self, rel):
        return os.path.join(self.root, rel)

    def open(self, path):
        fd = _open(path)
        self._fds.append(fd)
        return fd

    def close(self):
        for fd in self._fds:
            os.close(fd)
        self._fds = []

    def sample(self, t_us):
        raise NotImplementedError


# -- machine scope ------------------------------------------------------------

class CpuUtilMachine(Source):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.fd = self.open(self.p("proc/stat"))
        self.prev = self._read()

    def _read(self):
        data = _pread(self.fd, 512)
        fields = data[:data.index(b"\n")].split()[1:9]
        total = 0
        for x in fields:
            total += int(x)
        idle = int(fields[3]) + (int(fields[4]) if len(fields) > 4 else 0)
        return total, total - idle

    def sample(self, t_us):
        total, busy = self._read()
        dt = total - self.prev[0]
        db = busy - self.prev[1]
        self.prev = (total, busy)
        if dt <= 0:
            return ()
        return ((db * 10000 // dt, None),)


class MemUsedMachine(Source):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.fd = self.open(self.p("proc/meminfo"))
        if not self.sample(0):
            raise Unavailable("MemTotal/MemAvailable missing")

    def sample(self, t_us):
        data = _pread(self.fd, 4096)
        i = data.find(b"MemTotal:")
        j = data.find(b"MemAvailable:")
        if i < 0 or j < 0:
            return ()
        total = int(data[i + 9:data.index(b"kB", i)])
        avail = int(data[j + 13:data.index(b"kB", j)])
        return (((total - avail) * 1024, None),)


def find_rapl_packages(powercap_dir):
    zones = []
    try:
        entries = sorted(os.listdir(powercap_dir))
    except OSError:
        return zones
    for entry in entries:
        # top-level zones look like intel-rapl:0 / amd-rapl:0; subzones carry a second ':'
        if entry.count(":") != 1 or "rapl" not in entry:
            continue
        zone = os.path.join(powercap_dir, entry)
        try:
            name = _read(os.path.join(zone, "name")).strip()
            int(_read(os.path.join(zone, "energy_uj")))
        except (OSError, ValueError):
            continue
        if name.startswith(b"package"):
            zones.append(zone)
    return zones


class EnergyPkg(Source):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.files = [(self.open(os.path.join(z, "energy_uj")), os.path.basename(z))
                      for z in find_rapl_packages(self.p("sys/class/powercap"))]
        if not self.files:
            raise Unavailable("no powercap package zones")

    def sample(self, t_us):
        return [(int(_pread(fd, 64)), detail) for fd, detail in self.files]


class MachinePower(Source):
    """Reads an external meter's current draw (integer mW) from a file."""

    def __init__(self, cfg):
        super().__init__(cfg)
        self.path = self.options.get("path") or os.environ.get("GMT_POWER_METER_FILE")
        if not self.path:
            raise Unavailable("no power meter file configured")
        if not self.sample(0):
            raise Unavailable("power meter file unreadable: %s" % self.path)

    def sample(self, t_us):
        try:
            return ((int(_read(self.path).split()[0]), None),)
        except (OSError, ValueError, IndexError):
            return ()


CPU_HWMON_NAMES = (b"coretemp", b"k10temp", b"zenpower", b"cpu_thermal", b"soc_thermal", b"k8temp")


def find_cpu_temp_inputs(root):
    hwmon = os.path.join(root, "sys/class/hwmon")
    try:
        chips = sorted(os.listdir(hwmon))
    except OSError:
        chips = []
    for chip in chips:
        base = os.path.join(hwmon, chip)
        try:
            name = _read(os.path.join(base, "name")).strip()
        except OSError:
            continue
        if name in CPU_HWMON_NAMES:
            inputs = sorted(os.path.join(base, f) for f in os.listdir(base)
                            if f.startswith("temp") and f.endswith("_input"))
            if inputs:
                return inputs
    thermal = os.path.join(root, "sys/class/thermal")
    try:
        zones = sorted(z for z in os.listdir(thermal) if z.startswith("thermal_zone"))
    except OSError:
        zones = []
    for zone in zones:
        try:
            kind = _read(os.path.join(thermal, zone, "type")).strip().lower()
        except OSError:
            continue
        if b"pkg" in kind or b"cpu" in kind or b"x86" in kind:
            return [os.path.join(thermal, zone, "temp")]
    return []


class TempCpu(Source):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.fds = [self.open(p) for p in find_cpu_temp_inputs(self.root)]
        if not self.fds:
            raise Unavailable("no CPU temperature sensor")

    def sample(self, t_us):
        best = None
        for fd in self.fds:
            try:
                v = int(_pread(fd, 64))
            except (OSError, ValueError):
                continue
            if best is None or v > best:
                best = v
        return () if best is None else ((best, None),)


class DiskIo(Source):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.fd = self.open(self.p("proc/diskstats"))
        try:
            self.disks = {d.encode() for d in os.listdir(self.p("sys/block"))
                          if not d.startswith(("loop", "ram", "zram"))}
        except OSError:
            self.disks = None

    def _whole_disk(self, name):
        if self.disks is not None:
            return name in self.disks
        if name.startswith((b"loop", b"ram", b"zram")):
            return False
        return not name[-1:].isdigit()

    def sample(self, t_us):
        total = 0
        for line in _pread(self.fd).splitlines():
            f = line.split()
            if len(f) >= 10 and self._whole_disk(f[2]):
                total += (int(f[5]) + int(f[9])) * 512
        return ((total, None),)


class NetIo(Source):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.fd = self.open(self.p("proc/net/dev"))

    def sample(self, t_us):
        out = []
        for line in _pread(self.fd).splitlines():
            name, sep, rest = line.partition(b":")
            if not sep:
                continue
            f = rest.split()
            if len(f) >= 9:
                out.append((int(f[0]) + int(f[8]), name.strip().decode()))
        return out


class PageFaultsMachine(Source):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.fd = self.open(self.p("proc/vmstat"))
        if not self.sample(0):
            raise Unavailable("pgmajfault missing from vmstat")

    def sample(self, t_us):
        data = _pread(self.fd)
        i = data.find(b"\npgmajfault ")
        if i < 0:
            return ()
        return ((int(data[i + 12:data.index(b"\n", i + 1)]), None),)


# perf_event_open based instructions/cycles, machine wide (one counter pair per cpu)
PERF_TYPE_HARDWARE = 0
PERF_COUNT_HW_CPU_CYCLES = 0
PERF_COUNT_HW_INSTRUCTIONS = 1
_NR_PERF_EVENT_OPEN = {"x86_64": 298, "aarch64": 241, "i686": 336, "i386": 336}


def _perf_open(config, cpu):
    import ctypes
    import platform
    import struct
    nr = _NR_PERF_EVENT_OPEN.get(platform.machine())
    if nr is None:
        raise Unavailable("perf_event_open syscall number unknown")
    # perf_event_attr, VER0 layout (64 bytes); bit 5 of the flag word is exclude_kernel
    attr = struct.pack("IIQQQQQQ", PERF_TYPE_HARDWARE, 64, config, 0, 0, 0, 1 << 5, 0)
    buf = ctypes.create_string_buffer(attr, 64)
    libc = ctypes.CDLL(None, use_errno=True)
    fd = libc.syscall(nr, buf, -1, cpu, -1, 0)
    if fd < 0:
        raise Unavailable("perf_event_open failed (errno %d)" % ctypes.get_errno())
    return fd


class IpcProxy(Source):
    def __init__(self, cfg):
        super().__init__(cfg)
        if self.root != "/":
            raise Unavailable("perf counters need the real host")
        self.pairs = []
        for cpu in range(os.cpu_count() or 1):
            pair = (_perf_open(PERF_COUNT_HW_INSTRUCTIONS, cpu), _perf_open(PERF_COUNT_HW_CPU_CYCLES, cpu))
            self._fds.extend(pair)
            self.pairs.append(pair)
        self.prev = self._read()

    def _read(self):
        ins = cyc = 0
        for fi, fc in self.pairs:
            ins += int.from_bytes(os.pread(fi, 8, 0), "little")
            cyc += int.from_bytes(os.pread(fc, 8, 0), "little")
        return ins, cyc

    def sample(self, t_us):
        ins, cyc = self._read()
        di, dc = ins - self.prev[0], cyc - self.prev[1]
        self.prev = (ins, cyc)
        if dc <= 0:
            return ()
        return ((di * 100 // dc, None),)


# -- per-instance scope ---------------------------------------------------------

RESCAN_NS = 2_000_000_000


class Instances:
    """Process membership of each instance named in the instances file.

    The orchestrator rewrites the file (``<service>\\t<pid>`` lines, a name
    may repeat) as services boot and flow steps run. An instance is every
    process in a session led by one of its pids. Known members are re-read
    every tick; the full /proc scan that finds new members runs only every
    RESCAN_NS or when the file changes.

    CPU ticks and fault counts are summed over every process ever seen, using
    its last observed values, so per-instance counters never go backwards
    when a member exits.
    """

    def __init__(self, path, root):
        self.path = path
        self.proc = os.path.join(root, "proc")
        self.mtime = None
        self.leaders = {}  # session leader pid -> name
        self.entries = {}  # pid -> [name, ticks, majflt, rss, alive]
        self.next_scan = 0

    def _refresh(self):
        try:
            m = os.stat(self.path).st_mtime_ns
        except OSError:
            return False
        if m == self.mtime:
            return False
        self.mtime = m
        leaders = {}
        for line in _read(self.path).decode().splitlines():
            name, _, pid = line.partition("\t")
            if pid.strip().isdigit():
                leaders[int(pid)] = name
        self.leaders = leaders
        return True

    def _stat(self, pid):
        try:
            raw = _read("%s/%d/stat" % (self.proc, pid))
        except OSError:
            return None
        return raw[raw.rfind(b")") + 2:].split()

    @staticmethod
    def _update(entry, f):
        # fields after comm: 9 majflt, 10 cmajflt, 11-14 utime stime cutime cstime, 21 rss
        entry[1] = int(f[11]) + int(f[12]) + int(f[13]) + int(f[14])
        entry[2] = int(f[9]) + int(f[10])
        entry[3] = int(f[21])
        entry[4] = True

    def scan(self, now_ns):
        """Returns sorted [(name, ticks, majflt, rss_pages)] for instances with a live member."""
        if self._refresh() or now_ns >= self.next_scan:
            self.next_scan = now_ns + RESCAN_NS
            for e in self.entries.values():
                e[4] = False
            if self.leaders:
                for entry in os.listdir(self.proc):
                    if not entry.isdigit():
                        continue
                    f = self._stat(int(entry))
                    # f[3] is the session id
                    if f is None or int(f[3]) not in self.leaders:
                        continue
                    e = self.entries.setdefault(int(entry), [self.leaders[int(f[3])], 0, 0, 0, False])
                    self._update(e, f)
        else:
            for pid, e in self.entries.items():
                if e[4]:
                    f = self._stat(pid)
                    if f is None:
                        e[4] = False
                    else:
                        self._update(e, f)
        agg = {}
        for name, ticks, majflt, rss, alive in self.entries.values():
            a = agg.setdefault(name, [0, 0, 0, False])
            a[0] += ticks
            a[1] += majflt
            if alive:
                a[2] += rss
                a[3] = True
        return [(name, a[0], a[1], a[2]) for name, a in sorted(agg.items()) if a[3]]


class InstanceSource(Source):
    def __init__(self, cfg):
        super().__init__(cfg)
        path = cfg.get("instances_file")
        if not path:
            raise Unavailable("per-instance scope needs an instances file")
        self.instances = Instances(path, self.root)

    def scan(self):
        return self.instances.scan(time.monotonic_ns())


class CpuUtilInstance(InstanceSource):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.prev = {}

    def sample(self, t_us):
        out = []
        now = {}
        for name, ticks, _, _ in self.scan():
            now[name] = (ticks, t_us)
            prev = self.prev.get(name)
            if prev is not None and t_us > prev[1]:
                dticks = max(0, ticks - prev[0])
                out.append((dticks * 10000 * 1000000 // (_CLK_TCK * (t_us - prev[1])), name))
        self.prev = now
        return out


class MemUsedInstance(InstanceSource):
    def sample(self, t_us):
        return [(rss * _PAGE, name) for name, _, _, rss in self.scan()]


class PageFaultsInstance(InstanceSource):
    def sample(self, t_us):
        return [(majflt, name) for name, _, majflt, _ in self.scan()]


SOURCES = {
    ("cpu_util", "machine"): CpuUtilMachine,
    ("cpu_util", "instance"): CpuUtilInstance,
    ("mem_used", "machine"): MemUsedMachine,
    ("mem_used", "instance"): MemUsedInstance,
    ("energy_pkg", "machine"): EnergyPkg,
    ("machine_power", "machine"): MachinePower,
    ("temp_cpu", "machine"): TempCpu,
    ("disk_io", "machine"): DiskIo,
    ("net_io", "machine"): NetIo,
    ("page_faults_major", "machine"): PageFaultsMachine,
    ("page_faults_major", "instance"): PageFaultsInstance,
    ("ipc_proxy", "machine"): IpcProxy,
}


def _format(t_us, value, detail):
    if detail is None:
        return "%d\t%d\n" % (t_us, value)
    return "%d\t%d\t%s\n" % (t_us, value, detail)


def _read_stop(fd):
    """Returns (stop, end_t). Input other than a stop line is ignored."""
    data = os.read(fd, 4096)
    if not data:
        return True, None
    for line in data.decode("ascii", "replace").splitlines():
        parts = line.split()
        if parts and parts[0] == "stop":
            return True, int(parts[1]) if len(parts) > 1 else None
    return False, None


def load_script(path):
    accel = 1.0
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "accel":
                    accel = float(parts[1])
                continue
            if not line.strip():
                continue
            f = line.rstrip("\n").split("\t")
            rows.append((int(f[0]), int(f[1]), f[2] if len(f) > 2 else None))
    return accel, rows


def run_mock(cfg, out_fd):
    """Replays a script; script times are written verbatim.

    Rows are released at ``t / accel`` real seconds after start. On stop,
    every remaining row up to the given end time is flushed, so the file
    content depends only on the script and the end time.
    """
    accel, rows = load_script(cfg["script"])
    if cfg.get("accel"):
        accel = float(cfg["accel"])
    start = time.monotonic_ns()
    poller = select.poll()
    poller.register(0, select.POLLIN | select.POLLHUP)
    i = 0
    end_t = None
    while True:
        if i < len(rows):
            due = start + int(rows[i][0] * 1000 / accel)
            wait_ms = max(0, (due - time.monotonic_ns() + 999_999) // 1_000_000)
        else:
            wait_ms = -1
        if poller.poll(wait_ms):
            stop, end_t = _read_stop(0)
            if stop:
                break
            continue
        now = time.monotonic_ns()
        j = i
        while j < len(rows) and start + int(rows[j][0] * 1000 / accel) <= now:
            j += 1
        if j > i:
            os.write(out_fd, "".join(_format(*r) for r in rows[i:j]).encode())
            i = j
    tail = [r for r in rows[i:] if end_t is None or r[0] <= end_t]
    if tail:
        os.write(out_fd, "".join(_format(*r) for r in tail).encode())


def run_source(cfg, out_fd):
    key = (cfg["metric"], cfg.get("scope", "machine"))
    try:
        source = SOURCES[key](cfg)
    except KeyError:
        sys.stderr.write("unknown metric/scope %s/%s\n" % key)
        sys.exit(EXIT_CONFIG)
    except (Unavailable, OSError) as exc:
        sys.stderr.write("unavailable: %s\n" % exc)
        sys.exit(EXIT_UNAVAILABLE)
    interval_ns = int(cfg["interval_us"]) * 1000
    t0 = int(cfg["t0_ns"])
    poller = select.poll()
    poller.register(0, select.POLLIN | select.POLLHUP)
    monotonic_ns = time.monotonic_ns
    write = os.write
    next_ns = monotonic_ns()
    while True:
        wait_ms = (next_ns - monotonic_ns() + 999_999) // 1_000_000
        if poller.poll(wait_ms if wait_ms > 0 else 0):
            stop, _ = _read_stop(0)
            if stop:
                return
            continue
        now = monotonic_ns()
        if now < next_ns:
            continue
        t_us = (now - t0) // 1000
        try:
            rows = source.sample(t_us)
        except (OSError, ValueError):
            rows = ()
        if rows:
            write(out_fd, "".join([_format(t_us, v, d) for v, d in rows]).encode())
        next_ns += interval_ns
        if next_ns <= now:
            # missed ticks are skipped, not bunched
            next_ns = now + interval_ns - (now - next_ns) % interval_ns


def parse_args(args):
    """``key=value`` pairs; ``opt.<name>=value`` lands in cfg["options"]."""
    cfg = {"options": {}}
    for arg in args:
        key, sep, value = arg.partition("=")
        if not sep:
            raise ValueError("expected key=value, got %r" % arg)
        if key.startswith("opt."):
            cfg["options"][key[4:]] = value
        else:
            cfg[key] = value
    return cfg


def main(argv):
    try:
        cfg = parse_args(argv[1:])
        output = cfg["output"]
    except (ValueError, KeyError) as exc:
        sys.stderr.write("bad config: %s\n" % exc)
        return EXIT_CONFIG
    out_fd = os.open(output, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        if cfg.get("script"):
            run_mock(cfg, out_fd)
        else:
            run_source(cfg, out_fd)
        os.fsync(out_fd)
    finally:
        os.close(out_fd)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
