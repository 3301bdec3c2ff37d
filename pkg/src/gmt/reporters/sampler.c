/*
 * Native reporter child. Same command line, stop protocol, sources and
 * output format as _sampler.py; used instead of it whenever a C compiler is
 * available because a Python wakeup costs several times more CPU.
 *
 *   sampler metric=<id> scope=<machine|instance> interval_us=<n> output=<path>
 *           t0_ns=<n> root=<prefix> [instances_file=<path>] [script=<path>]
 *           [accel=<x>] [opt.path=<meter file>]
 *
 * Exit codes: 0 stopped normally, 2 bad config, 3 metric unavailable.
 */
#define _GNU_SOURCE
#include <ctype.h>
#include <dirent.h>
#include <errno.h>
#include <fcntl.h>
#include <poll.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/stat.h>
#include <sys/syscall.h>
#include <time.h>
#include <unistd.h>
#ifdef __linux__
#include <linux/perf_event.h>
#endif

#define EXIT_CONFIG 2
#define EXIT_UNAVAILABLE 3
#define BUFSZ (1 << 16)
#define MAXROWS 256
#define MAXDETAIL 128
#define RESCAN_NS 2000000000LL

typedef struct {
	const char *metric, *scope, *output, *root, *instances_file, *script, *opt_path;
	long long interval_us, t0_ns;
	double accel;
} config;

typedef struct {
	long long value;
	char detail[MAXDETAIL];
	int has_detail;
} row;

static config cfg;
static char buf[BUFSZ];
static row rows[MAXROWS];
static int nrows;

static long long mono_ns(void)
{
	struct timespec ts;
	clock_gettime(CLOCK_MONOTONIC, &ts);
	return (long long)ts.tv_sec * 1000000000LL + ts.tv_nsec;
}

static void emit(long long value, const char *detail)
{
	if (nrows >= MAXROWS)
		return;
	rows[nrows].value = value;
	rows[nrows].has_detail = detail != NULL;
	if (detail) {
		strncpy(rows[nrows].detail, detail, MAXDETAIL - 1);
		rows[nrows].detail[MAXDETAIL - 1] = 0;
	}
	nrows++;
}

static void path_join(char *out, size_t n, const char *a, const char *b)
{
	size_t la = strlen(a);
	snprintf(out, n, "%s%s%s", a, (la && a[la - 1] == '/') ? "" : "/", b);
}

static int open_rel(const char *rel)
{
	char p[4096];
	path_join(p, sizeof p, cfg.root, rel);
	return open(p, O_RDONLY);
}

static ssize_t pread_all(int fd, char *b, size_t n)
{
	ssize_t r = pread(fd, b, n - 1, 0);
	if (r < 0)
		return -1;
	b[r] = 0;
	return r;
}

static int read_file(const char *path, char *b, size_t n)
{
	int fd = open(path, O_RDONLY);
	if (fd < 0)
		return -1;
	ssize_t r = pread_all(fd, b, n);
	close(fd);
	return r < 0 ? -1 : (int)r;
}

static int parse_ll(const char *s, long long *out)
{
	char *end;
	while (*s == ' ' || *s == '\t')
		s++;
	errno = 0;
	long long v = strtoll(s, &end, 10);
	if (end == s || errno)
		return -1;
	*out = v;
	return 0;
}

static int cmpstr(const void *a, const void *b)
{
	return strcmp(*(char *const *)a, *(char *const *)b);
}

/* sorted directory listing; caller frees names and array */
static int list_dir(const char *dir, char ***names)
{
	DIR *d = opendir(dir);
	if (!d)
		return -1;
	int n = 0, cap = 16;
	char **v = malloc(cap * sizeof *v);
	struct dirent *e;
	while ((e = readdir(d))) {
		if (e->d_name[0] == '.')
			continue;
		if (n == cap)
			v = realloc(v, (cap *= 2) * sizeof *v);
		v[n++] = strdup(e->d_name);
	}
	closedir(d);
	qsort(v, n, sizeof *v, cmpstr);
	*names = v;
	return n;
}

static void free_list(char **v, int n)
{
	for (int i = 0; i < n; i++)
		free(v[i]);
	free(v);
}

/* ---- sources --------------------------------------------------------------- */

typedef struct source {
	int (*sample)(struct source *, long long t_us);
	int fd;
	int nfds;
	int fds[64];
	char names[64][MAXDETAIL];
	long long prev_a, prev_b;
	int have_prev;
	char path[4096];
	char disks[256][64];
	int ndisks; /* -1: no /sys/block, fall back to name heuristics */
} source;

static source src;

static int cpu_machine_read(long long *total, long long *busy)
{
	if (pread_all(src.fd, buf, 1024) < 0)
		return -1;
	char *p = buf;
	while (*p && !isspace((unsigned char)*p))
		p++;
	long long f[8] = {0};
	int n = 0;
	while (n < 8) {
		char *end;
		long long v = strtoll(p, &end, 10);
		if (end == p)
			break;
		f[n++] = v;
		p = end;
		if (*p == '\n')
			break;
	}
	if (n < 4)
		return -1;
	long long t = 0;
	for (int i = 0; i < n; i++)
		t += f[i];
	*total = t;
	*busy = t - f[3] - (n > 4 ? f[4] : 0);
	return 0;
}

static int cpu_machine_sample(source *s, long long t_us)
{
	long long total, busy;
	(void)t_us;
	if (cpu_machine_read(&total, &busy) < 0)
		return -1;
	long long dt = total - s->prev_a, db = busy - s->prev_b;
	s->prev_a = total;
	s->prev_b = busy;
	if (dt > 0)
		emit(db * 10000 / dt, NULL);
	return 0;
}

static int kb_field(const char *text, const char *key, long long *out)
{
	const char *p = strstr(text, key);
	if (!p)
		return -1;
	return parse_ll(p + strlen(key), out);
}

static int mem_machine_sample(source *s, long long t_us)
{
	long long total, avail;
	(void)t_us;
	if (pread_all(s->fd, buf, 8192) < 0)
		return -1;
	if (kb_field(buf, "MemTotal:", &total) || kb_field(buf, "MemAvailable:", &avail))
		return -1;
	emit((total - avail) * 1024, NULL);
	return 0;
}

static int energy_sample(source *s, long long t_us)
{
	(void)t_us;
	for (int i = 0; i < s->nfds; i++) {
		long long v;
		if (pread_all(s->fds[i], buf, 64) < 0 || parse_ll(buf, &v))
			continue;
		emit(v, s->names[i]);
	}
	return 0;
}

static int power_sample(source *s, long long t_us)
{
	long long v;
	(void)t_us;
	if (read_file(s->path, buf, 256) < 0 || parse_ll(buf, &v))
		return -1;
	emit(v, NULL);
	return 0;
}

static int temp_sample(source *s, long long t_us)
{
	long long best = 0;
	int have = 0;
	(void)t_us;
	for (int i = 0; i < s->nfds; i++) {
		long long v;
		if (pread_all(s->fds[i], buf, 64) < 0 || parse_ll(buf, &v))
			continue;
		if (!have || v > best)
			best = v;
		have = 1;
	}
	if (have)
		emit(best, NULL);
	return 0;
}

static int is_virtual_disk(const char *name)
{
	return !strncmp(name, "loop", 4) || !strncmp(name, "ram", 3) || !strncmp(name, "zram", 4);
}

static int whole_disk(source *s, const char *name)
{
	if (s->ndisks >= 0) {
		for (int i = 0; i < s->ndisks; i++)
			if (!strcmp(s->disks[i], name))
				return 1;
		return 0;
	}
	size_t n = strlen(name);
	return !is_virtual_disk(name) && n && !isdigit((unsigned char)name[n - 1]);
}

static int disk_sample(source *s, long long t_us)
{
	(void)t_us;
	if (pread_all(s->fd, buf, BUFSZ) < 0)
		return -1;
	long long total = 0;
	char *save = NULL;
	for (char *line = strtok_r(buf, "\n", &save); line; line = strtok_r(NULL, "\n", &save)) {
		char name[64];
		unsigned long long f[14];
		int n = sscanf(line, "%llu %llu %63s %llu %llu %llu %llu %llu %llu %llu",
			       &f[0], &f[1], name, &f[3], &f[4], &f[5], &f[6], &f[7], &f[8], &f[9]);
		if (n < 10 || !whole_disk(s, name))
			continue;
		total += (long long)(f[5] + f[9]) * 512;
	}
	emit(total, NULL);
	return 0;
}

static int net_sample(source *s, long long t_us)
{
	(void)t_us;
	if (pread_all(s->fd, buf, BUFSZ) < 0)
		return -1;
	char *save = NULL;
	for (char *line = strtok_r(buf, "\n", &save); line; line = strtok_r(NULL, "\n", &save)) {
		char *colon = strchr(line, ':');
		if (!colon)
			continue;
		*colon = 0;
		while (*line == ' ')
			line++;
		unsigned long long f[9];
		int n = sscanf(colon + 1, "%llu %llu %llu %llu %llu %llu %llu %llu %llu",
			       &f[0], &f[1], &f[2], &f[3], &f[4], &f[5], &f[6], &f[7], &f[8]);
		if (n < 9)
			continue;
		emit((long long)(f[0] + f[8]), line);
	}
	return 0;
}

static int pgfault_machine_sample(source *s, long long t_us)
{
	long long v;
	(void)t_us;
	if (pread_all(s->fd, buf, BUFSZ) < 0)
		return -1;
	char *p = strstr(buf, "\npgmajfault ");
	if (!p || parse_ll(p + 12, &v))
		return -1;
	emit(v, NULL);
	return 0;
}

#ifdef __linux__
static int perf_open(unsigned long long config_, int cpu)
{
	struct perf_event_attr attr;
	memset(&attr, 0, sizeof attr);
	attr.type = PERF_TYPE_HARDWARE;
	attr.size = sizeof attr;
	attr.config = config_;
	attr.exclude_kernel = 1;
	return (int)syscall(SYS_perf_event_open, &attr, -1, cpu, -1, 0);
}
#endif

static int ipc_read(source *s, long long *ins, long long *cyc)
{
	*ins = *cyc = 0;
	for (int i = 0; i + 1 < s->nfds; i += 2) {
		uint64_t a = 0, b = 0;
		if (pread(s->fds[i], &a, 8, 0) != 8 || pread(s->fds[i + 1], &b, 8, 0) != 8)
			return -1;
		*ins += (long long)a;
		*cyc += (long long)b;
	}
	return 0;
}

static int ipc_sample(source *s, long long t_us)
{
	long long ins, cyc;
	(void)t_us;
	if (ipc_read(s, &ins, &cyc))
		return -1;
	long long di = ins - s->prev_a, dc = cyc - s->prev_b;
	s->prev_a = ins;
	s->prev_b = cyc;
	if (dc > 0)
		emit(di * 100 / dc, NULL);
	return 0;
}

/* ---- per-instance scope ---------------------------------------------------- */

/*
 * The instances file holds "<name>\t<pid>" lines, names may repeat. An
 * instance is every process in a session led by one of its pids. Ticks and
 * fault counts are summed over every process ever seen (last observed
 * values), so per-instance counters never go backwards when a member exits.
 */
#define MAXINST 64
#define MAXLEADERS 256
#define MAXENTRIES 8192

typedef struct {
	int pid, name, alive;
	long long ticks, majflt, rss;
} pentry;

static struct {
	char names[MAXINST][MAXDETAIL];
	int nnames;
	long long leader_pid[MAXLEADERS];
	int leader_name[MAXLEADERS];
	int nleaders;
	pentry e[MAXENTRIES];
	int ne;
	long long mtime, next_scan;
	long long ticks[MAXINST], majflt[MAXINST], rss[MAXINST];
	int alive[MAXINST];
	long long prev_ticks[MAXINST], prev_t[MAXINST];
	int have_prev[MAXINST];
} inst;

static int name_index(const char *name)
{
	for (int i = 0; i < inst.nnames; i++)
		if (!strcmp(inst.names[i], name))
			return i;
	if (inst.nnames >= MAXINST)
		return -1;
	strncpy(inst.names[inst.nnames], name, MAXDETAIL - 1);
	inst.names[inst.nnames][MAXDETAIL - 1] = 0;
	return inst.nnames++;
}

static int inst_refresh(void)
{
	struct stat st;
	if (stat(cfg.instances_file, &st) < 0)
		return 0;
	long long m = (long long)st.st_mtim.tv_sec * 1000000000LL + st.st_mtim.tv_nsec;
	if (m == inst.mtime)
		return 0;
	inst.mtime = m;
	static char text[BUFSZ];
	if (read_file(cfg.instances_file, text, sizeof text) < 0)
		return 0;
	inst.nleaders = 0;
	char *save = NULL;
	for (char *line = strtok_r(text, "\n", &save); line && inst.nleaders < MAXLEADERS;
	     line = strtok_r(NULL, "\n", &save)) {
		char *tab = strchr(line, '\t');
		long long pid;
		if (!tab)
			continue;
		*tab = 0;
		if (parse_ll(tab + 1, &pid))
			continue;
		int k = name_index(line);
		if (k < 0)
			continue;
		inst.leader_pid[inst.nleaders] = pid;
		inst.leader_name[inst.nleaders++] = k;
	}
	return 1;
}

/* fields after "comm) ": index 0 is state, 3 session, 9 majflt, 10 cmajflt,
 * 11 utime, 12 stime, 13 cutime, 14 cstime, 21 rss */
static int read_pid_stat(int pid, long long *f, int nf)
{
	char p[256];
	snprintf(p, sizeof p, "%s%sproc/%d/stat", cfg.root,
		 cfg.root[strlen(cfg.root) - 1] == '/' ? "" : "/", pid);
	static char sb[4096];
	if (read_file(p, sb, sizeof sb) < 0)
		return -1;
	char *q = strrchr(sb, ')');
	if (!q || !q[1])
		return -1;
	q += 2;
	int i = 0;
	while (*q && i < nf) {
		if (i == 0) {
			f[i++] = 0; /* state letter */
			while (*q && *q != ' ')
				q++;
		} else {
			char *end;
			f[i++] = strtoll(q, &end, 10);
			q = end;
		}
		while (*q == ' ')
			q++;
	}
	return i >= nf ? 0 : -1;
}

static void entry_update(pentry *e, const long long *f)
{
	e->ticks = f[11] + f[12] + f[13] + f[14];
	e->majflt = f[9] + f[10];
	e->rss = f[21];
	e->alive = 1;
}

static int leader_name_of(long long sid)
{
	for (int k = 0; k < inst.nleaders; k++)
		if (inst.leader_pid[k] == sid)
			return inst.leader_name[k];
	return -1;
}

static void inst_scan(void)
{
	long long f[22];
	long long now = mono_ns();
	if (inst_refresh() || now >= inst.next_scan) {
		inst.next_scan = now + RESCAN_NS;
		for (int i = 0; i < inst.ne; i++)
			inst.e[i].alive = 0;
		char procdir[4096];
		path_join(procdir, sizeof procdir, cfg.root, "proc");
		DIR *d = inst.nleaders ? opendir(procdir) : NULL;
		struct dirent *de;
		while (d && (de = readdir(d))) {
			if (!isdigit((unsigned char)de->d_name[0]))
				continue;
			int pid = atoi(de->d_name);
			if (read_pid_stat(pid, f, 22) < 0)
				continue;
			int name = leader_name_of(f[3]);
			if (name < 0)
				continue;
			int i = 0;
			while (i < inst.ne && inst.e[i].pid != pid)
				i++;
			if (i == inst.ne) {
				if (inst.ne >= MAXENTRIES)
					continue;
				inst.e[inst.ne].pid = pid;
				inst.e[inst.ne].name = name;
				inst.ne++;
			}
			entry_update(&inst.e[i], f);
		}
		if (d)
			closedir(d);
	} else {
		for (int i = 0; i < inst.ne; i++) {
			if (!inst.e[i].alive)
				continue;
			if (read_pid_stat(inst.e[i].pid, f, 22) < 0)
				inst.e[i].alive = 0;
			else
				entry_update(&inst.e[i], f);
		}
	}
	memset(inst.ticks, 0, sizeof inst.ticks);
	memset(inst.majflt, 0, sizeof inst.majflt);
	memset(inst.rss, 0, sizeof inst.rss);
	memset(inst.alive, 0, sizeof inst.alive);
	for (int i = 0; i < inst.ne; i++) {
		pentry *e = &inst.e[i];
		inst.ticks[e->name] += e->ticks;
		inst.majflt[e->name] += e->majflt;
		if (e->alive) {
			inst.rss[e->name] += e->rss;
			inst.alive[e->name] = 1;
		}
	}
}

static int order_by_name(const void *a, const void *b)
{
	return strcmp(inst.names[*(const int *)a], inst.names[*(const int *)b]);
}

static int sorted_instances(int *idx)
{
	int n = 0;
	for (int k = 0; k < inst.nnames; k++)
		if (inst.alive[k])
			idx[n++] = k;
	qsort(idx, n, sizeof *idx, order_by_name);
	return n;
}

static long clk_tck;
static long page_size;

static int cpu_inst_sample(source *s, long long t_us)
{
	int idx[MAXINST];
	(void)s;
	inst_scan();
	int n = sorted_instances(idx);
	for (int i = 0; i < n; i++) {
		int k = idx[i];
		if (inst.have_prev[k] && t_us > inst.prev_t[k]) {
			long long d = inst.ticks[k] - inst.prev_ticks[k];
			if (d < 0)
				d = 0;
			emit(d * 10000LL * 1000000LL / (clk_tck * (t_us - inst.prev_t[k])), inst.names[k]);
		}
	}
	for (int k = 0; k < inst.nnames; k++) {
		inst.have_prev[k] = inst.alive[k];
		if (inst.alive[k]) {
			inst.prev_ticks[k] = inst.ticks[k];
			inst.prev_t[k] = t_us;
		}
	}
	return 0;
}

static int mem_inst_sample(source *s, long long t_us)
{
	int idx[MAXINST];
	(void)s;
	(void)t_us;
	inst_scan();
	int n = sorted_instances(idx);
	for (int i = 0; i < n; i++)
		emit(inst.rss[idx[i]] * page_size, inst.names[idx[i]]);
	return 0;
}

static int pgfault_inst_sample(source *s, long long t_us)
{
	int idx[MAXINST];
	(void)s;
	(void)t_us;
	inst_scan();
	int n = sorted_instances(idx);
	for (int i = 0; i < n; i++)
		emit(inst.majflt[idx[i]], inst.names[idx[i]]);
	return 0;
}

/* ---- source setup ---------------------------------------------------------- */

static int unavailable(const char *why)
{
	fprintf(stderr, "unavailable: %s\n", why);
	return EXIT_UNAVAILABLE;
}

static int add_fd(const char *path, const char *name)
{
	if (src.nfds >= 64)
		return -1;
	int fd = open(path, O_RDONLY);
	if (fd < 0)
		return -1;
	src.fds[src.nfds] = fd;
	strncpy(src.names[src.nfds], name ? name : "", MAXDETAIL - 1);
	src.nfds++;
	return 0;
}

static int has_prefix_ci(const char *s, const char *needle)
{
	return strcasestr(s, needle) != NULL;
}

static int setup_temp(void)
{
	static const char *cpu_chips[] = {"coretemp", "k10temp", "zenpower", "cpu_thermal", "soc_thermal", "k8temp"};
	char dir[4096], p[4096];
	char **chips;
	path_join(dir, sizeof dir, cfg.root, "sys/class/hwmon");
	int n = list_dir(dir, &chips);
	for (int i = 0; i < n && !src.nfds; i++) {
		char base[4096];
		path_join(base, sizeof base, dir, chips[i]);
		path_join(p, sizeof p, base, "name");
		if (read_file(p, buf, 256) < 0)
			continue;
		buf[strcspn(buf, "\n")] = 0;
		int match = 0;
		for (size_t c = 0; c < sizeof cpu_chips / sizeof *cpu_chips; c++)
			match |= !strcmp(buf, cpu_chips[c]);
		if (!match)
			continue;
		char **files;
		int nf = list_dir(base, &files);
		for (int j = 0; j < nf; j++) {
			size_t l = strlen(files[j]);
			if (!strncmp(files[j], "temp", 4) && l > 6 && !strcmp(files[j] + l - 6, "_input")) {
				path_join(p, sizeof p, base, files[j]);
				add_fd(p, NULL);
			}
		}
		if (nf > 0)
			free_list(files, nf);
	}
	if (n > 0)
		free_list(chips, n);
	if (src.nfds)
		return 0;
	path_join(dir, sizeof dir, cfg.root, "sys/class/thermal");
	char **zones;
	n = list_dir(dir, &zones);
	for (int i = 0; i < n && !src.nfds; i++) {
		if (strncmp(zones[i], "thermal_zone", 12))
			continue;
		char base[4096];
		path_join(base, sizeof base, dir, zones[i]);
		path_join(p, sizeof p, base, "type");
		if (read_file(p, buf, 256) < 0)
			continue;
		if (has_prefix_ci(buf, "pkg") || has_prefix_ci(buf, "cpu") || has_prefix_ci(buf, "x86")) {
			path_join(p, sizeof p, base, "temp");
			add_fd(p, NULL);
		}
	}
	if (n > 0)
		free_list(zones, n);
	return src.nfds ? 0 : -1;
}

static int setup_energy(void)
{
	char dir[4096], p[4096];
	char **entries;
	path_join(dir, sizeof dir, cfg.root, "sys/class/powercap");
	int n = list_dir(dir, &entries);
	for (int i = 0; i < n; i++) {
		const char *e = entries[i];
		const char *c = strchr(e, ':');
		if (!c || strchr(c + 1, ':') || !strstr(e, "rapl"))
			continue;
		char zone[4096];
		long long v;
		path_join(zone, sizeof zone, dir, e);
		path_join(p, sizeof p, zone, "name");
		if (read_file(p, buf, 256) < 0 || strncmp(buf, "package", 7))
			continue;
		path_join(p, sizeof p, zone, "energy_uj");
		if (read_file(p, buf, 64) < 0 || parse_ll(buf, &v))
			continue;
		add_fd(p, e);
	}
	if (n > 0)
		free_list(entries, n);
	return src.nfds ? 0 : -1;
}

static int setup_source(void)
{
	const char *m = cfg.metric;
	int inst_scope = !strcmp(cfg.scope, "instance");
	src.ndisks = -1;
	if (inst_scope) {
		if (!cfg.instances_file)
			return unavailable("per-instance scope needs an instances file");
		if (!strcmp(m, "cpu_util"))
			src.sample = cpu_inst_sample;
		else if (!strcmp(m, "mem_used"))
			src.sample = mem_inst_sample;
		else if (!strcmp(m, "page_faults_major"))
			src.sample = pgfault_inst_sample;
		else
			goto unknown;
		return 0;
	}
	if (strcmp(cfg.scope, "machine"))
		goto unknown;
	if (!strcmp(m, "cpu_util")) {
		if ((src.fd = open_rel("proc/stat")) < 0 || cpu_machine_read(&src.prev_a, &src.prev_b))
			return unavailable("proc/stat");
		src.sample = cpu_machine_sample;
	} else if (!strcmp(m, "mem_used")) {
		src.sample = mem_machine_sample;
		if ((src.fd = open_rel("proc/meminfo")) < 0 || src.sample(&src, 0))
			return unavailable("MemTotal/MemAvailable missing");
		nrows = 0;
	} else if (!strcmp(m, "energy_pkg")) {
		if (setup_energy())
			return unavailable("no powercap package zones");
		src.sample = energy_sample;
	} else if (!strcmp(m, "machine_power")) {
		const char *p = cfg.opt_path ? cfg.opt_path : getenv("GMT_POWER_METER_FILE");
		if (!p || !*p)
			return unavailable("no power meter file configured");
		strncpy(src.path, p, sizeof src.path - 1);
		src.sample = power_sample;
		if (src.sample(&src, 0))
			return unavailable("power meter file unreadable");
		nrows = 0;
	} else if (!strcmp(m, "temp_cpu")) {
		if (setup_temp())
			return unavailable("no CPU temperature sensor");
		src.sample = temp_sample;
	} else if (!strcmp(m, "disk_io")) {
		if ((src.fd = open_rel("proc/diskstats")) < 0)
			return unavailable("proc/diskstats");
		char dir[4096];
		char **disks;
		path_join(dir, sizeof dir, cfg.root, "sys/block");
		int n = list_dir(dir, &disks);
		if (n >= 0) {
			src.ndisks = 0;
			for (int i = 0; i < n && src.ndisks < 256; i++)
				if (!is_virtual_disk(disks[i]))
					strncpy(src.disks[src.ndisks++], disks[i], 63);
			free_list(disks, n);
		}
		src.sample = disk_sample;
	} else if (!strcmp(m, "net_io")) {
		if ((src.fd = open_rel("proc/net/dev")) < 0)
			return unavailable("proc/net/dev");
		src.sample = net_sample;
	} else if (!strcmp(m, "page_faults_major")) {
		src.sample = pgfault_machine_sample;
		if ((src.fd = open_rel("proc/vmstat")) < 0 || src.sample(&src, 0))
			return unavailable("pgmajfault missing from vmstat");
		nrows = 0;
	} else if (!strcmp(m, "ipc_proxy")) {
#ifdef __linux__
		if (strcmp(cfg.root, "/"))
			return unavailable("perf counters need the real host");
		long ncpu = sysconf(_SC_NPROCESSORS_CONF);
		for (long c = 0; c < ncpu && c < 32; c++) {
			int a = perf_open(PERF_COUNT_HW_INSTRUCTIONS, (int)c);
			int b = perf_open(PERF_COUNT_HW_CPU_CYCLES, (int)c);
			if (a < 0 || b < 0)
				return unavailable("perf_event_open failed");
			src.fds[src.nfds++] = a;
			src.fds[src.nfds++] = b;
		}
		if (ipc_read(&src, &src.prev_a, &src.prev_b))
			return unavailable("perf counters unreadable");
		src.sample = ipc_sample;
#else
		return unavailable("perf counters need Linux");
#endif
	} else {
		goto unknown;
	}
	return 0;
unknown:
	fprintf(stderr, "unknown metric/scope %s/%s\n", m, cfg.scope);
	return EXIT_CONFIG;
}

/* ---- main loops ------------------------------------------------------------ */

static int write_all(int fd, const char *p, size_t n)
{
	while (n) {
		ssize_t w = write(fd, p, n);
		if (w < 0) {
			if (errno == EINTR)
				continue;
			return -1;
		}
		p += w;
		n -= (size_t)w;
	}
	return 0;
}

static size_t format_row(char *out, size_t cap, long long t, long long v, const char *detail)
{
	int n = detail ? snprintf(out, cap, "%lld\t%lld\t%s\n", t, v, detail)
		       : snprintf(out, cap, "%lld\t%lld\n", t, v);
	return n < 0 ? 0 : ((size_t)n < cap ? (size_t)n : cap - 1);
}

/* returns 1 on stop; *end_t = -1 when no end time was given */
static int read_stop(long long *end_t)
{
	char in[4096];
	ssize_t n = read(0, in, sizeof in - 1);
	*end_t = -1;
	if (n <= 0)
		return 1;
	in[n] = 0;
	char *save = NULL;
	for (char *line = strtok_r(in, "\n", &save); line; line = strtok_r(NULL, "\n", &save)) {
		if (!strncmp(line, "stop", 4) && (line[4] == 0 || line[4] == ' ')) {
			long long v;
			if (line[4] == ' ' && !parse_ll(line + 5, &v))
				*end_t = v;
			return 1;
		}
	}
	return 0;
}

static int run_source(int out)
{
	static char obuf[BUFSZ];
	long long interval_ns = cfg.interval_us * 1000;
	long long next = mono_ns();
	struct pollfd pfd = {0, POLLIN, 0};
	for (;;) {
		long long wait = (next - mono_ns() + 999999) / 1000000;
		if (poll(&pfd, 1, wait > 0 ? (int)wait : 0) > 0) {
			long long end_t;
			if (read_stop(&end_t))
				return 0;
			continue;
		}
		long long now = mono_ns();
		if (now < next)
			continue;
		long long t_us = (now - cfg.t0_ns) / 1000;
		nrows = 0;
		src.sample(&src, t_us);
		size_t len = 0;
		for (int i = 0; i < nrows; i++)
			len += format_row(obuf + len, sizeof obuf - len, t_us, rows[i].value,
					  rows[i].has_detail ? rows[i].detail : NULL);
		if (len && write_all(out, obuf, len) < 0)
			return 1;
		next += interval_ns;
		if (next <= now)
			next = now + interval_ns - (now - next) % interval_ns;
	}
}

typedef struct {
	long long t, v;
	char *detail;
} script_row;

static int run_mock(int out)
{
	FILE *fh = fopen(cfg.script, "r");
	if (!fh) {
		fprintf(stderr, "cannot open script %s\n", cfg.script);
		return EXIT_CONFIG;
	}
	double accel = 1.0;
	int n = 0, cap = 1024;
	script_row *r = malloc(cap * sizeof *r);
	char *line = NULL;
	size_t lcap = 0;
	ssize_t len;
	while ((len = getline(&line, &lcap, fh)) > 0) {
		if (line[len - 1] == '\n')
			line[--len] = 0;
		if (line[0] == '#') {
			double a;
			char extra;
			if (sscanf(line + 1, " accel %lf %c", &a, &extra) == 1)
				accel = a;
			continue;
		}
		if (!len)
			continue;
		if (n == cap)
			r = realloc(r, (cap *= 2) * sizeof *r);
		char *tab1 = strchr(line, '\t');
		if (!tab1)
			continue;
		char *tab2 = strchr(tab1 + 1, '\t');
		if (tab2)
			*tab2 = 0;
		r[n].t = strtoll(line, NULL, 10);
		r[n].v = strtoll(tab1 + 1, NULL, 10);
		r[n].detail = tab2 ? strdup(tab2 + 1) : NULL;
		n++;
	}
	free(line);
	fclose(fh);
	if (cfg.accel > 0)
		accel = cfg.accel;

	static char obuf[BUFSZ];
	long long start = mono_ns();
	struct pollfd pfd = {0, POLLIN, 0};
	int i = 0;
	long long end_t = -1;
	for (;;) {
		int wait = -1;
		if (i < n) {
			long long due = start + (long long)(r[i].t * 1000 / accel);
			long long w = (due - mono_ns() + 999999) / 1000000;
			wait = w > 0 ? (int)w : 0;
		}
		if (poll(&pfd, 1, wait) > 0) {
			if (read_stop(&end_t))
				break;
			continue;
		}
		long long now = mono_ns();
		size_t olen = 0;
		while (i < n && start + (long long)(r[i].t * 1000 / accel) <= now) {
			if (olen > sizeof obuf - 256) {
				write_all(out, obuf, olen);
				olen = 0;
			}
			olen += format_row(obuf + olen, sizeof obuf - olen, r[i].t, r[i].v, r[i].detail);
			i++;
		}
		if (olen)
			write_all(out, obuf, olen);
	}
	size_t olen = 0;
	for (; i < n; i++) {
		if (end_t >= 0 && r[i].t > end_t)
			continue;
		if (olen > sizeof obuf - 256) {
			write_all(out, obuf, olen);
			olen = 0;
		}
		olen += format_row(obuf + olen, sizeof obuf - olen, r[i].t, r[i].v, r[i].detail);
	}
	if (olen)
		write_all(out, obuf, olen);
	return 0;
}

int main(int argc, char **argv)
{
	cfg.scope = "machine";
	cfg.root = "/";
	cfg.interval_us = -1;
	for (int i = 1; i < argc; i++) {
		char *eq = strchr(argv[i], '=');
		if (!eq) {
			fprintf(stderr, "bad config: expected key=value, got %s\n", argv[i]);
			return EXIT_CONFIG;
		}
		*eq = 0;
		const char *k = argv[i], *v = eq + 1;
		if (!strcmp(k, "metric"))
			cfg.metric = v;
		else if (!strcmp(k, "scope"))
			cfg.scope = v;
		else if (!strcmp(k, "interval_us"))
			cfg.interval_us = atoll(v);
		else if (!strcmp(k, "output"))
			cfg.output = v;
		else if (!strcmp(k, "t0_ns"))
			cfg.t0_ns = atoll(v);
		else if (!strcmp(k, "root"))
			cfg.root = v;
		else if (!strcmp(k, "instances_file"))
			cfg.instances_file = v;
		else if (!strcmp(k, "script"))
			cfg.script = v;
		else if (!strcmp(k, "accel"))
			cfg.accel = atof(v);
		else if (!strcmp(k, "opt.path"))
			cfg.opt_path = v;
	}
	if (!cfg.output || !cfg.metric || (!cfg.script && cfg.interval_us <= 0)) {
		fprintf(stderr, "bad config: metric, output and interval_us are required\n");
		return EXIT_CONFIG;
	}
	clk_tck = sysconf(_SC_CLK_TCK);
	page_size = sysconf(_SC_PAGESIZE);
	int out = open(cfg.output, O_WRONLY | O_APPEND | O_CREAT, 0644);
	if (out < 0) {
		perror(cfg.output);
		return EXIT_CONFIG;
	}
	int rc;
	if (cfg.script) {
		rc = run_mock(out);
	} else {
		rc = setup_source();
		if (rc == 0)
			rc = run_source(out);
	}
	fsync(out);
	close(out);
	return rc;
}
