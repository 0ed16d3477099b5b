# Interpreter driver for the local backend.
#
# Frames are a 4-byte big-endian length followed by UTF-8 JSON.
# host -> driver: exec {id, cell_id, code}, interrupt, tool_result {call_id, ok, value | ename, evalue}
# driver -> host: stdout {text}, stderr {text}, rich {mime, text, path},
#                 error {ename, evalue, traceback}, tool_call {call_id, name, args},
#                 done {id, status: ready | ok | error | interrupted}
import ast
import json
import os
import queue
import shlex
import signal
import struct
import subprocess
import sys
import threading
import traceback

ALLOW_NETWORK = os.environ.get("CELLWISE_ALLOW_NETWORK") == "1"
OUTPUT_DIR = "outputs"

_in = os.fdopen(os.dup(0), "rb", buffering=0)
_out_fd = os.dup(1)
_devnull = os.open(os.devnull, os.O_RDWR)
os.dup2(_devnull, 0)
os.dup2(2, 1)  # stray fd-level writes go to the host's log pipe

_write_lock = threading.Lock()
_executing = threading.Event()
_exec_queue = queue.Queue()
_tool_results = queue.Queue()
_call_seq = [0]


def send(frame):
    data = json.dumps(frame).encode("utf-8")
    with _write_lock:
        os.write(_out_fd, struct.pack(">I", len(data)) + data)


def read_exact(n):
    buf = b""
    while len(buf) < n:
        chunk = _in.read(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def reader():
    while True:
        head = read_exact(4)
        if head is None:
            _exec_queue.put(None)
            return
        body = read_exact(struct.unpack(">I", head)[0])
        if body is None:
            _exec_queue.put(None)
            return
        frame = json.loads(body.decode("utf-8"))
        kind = frame.get("type")
        if kind == "interrupt":
            if _executing.is_set():
                os.kill(os.getpid(), signal.SIGINT)
        elif kind == "tool_result":
            _tool_results.put(frame)
        else:
            _exec_queue.put(frame)


def on_sigint(signum, frame):
    if _executing.is_set():
        raise KeyboardInterrupt()


class Stream:
    def __init__(self, name):
        self.name = name
        self.buf = []
        self.size = 0

    def write(self, text):
        if not isinstance(text, str):
            text = str(text)
        self.buf.append(text)
        self.size += len(text)
        if self.size > 8192:
            self.flush()
        return len(text)

    def flush(self):
        if self.buf:
            text = "".join(self.buf)
            self.buf = []
            self.size = 0
            send({"type": self.name, "text": text})

    def isatty(self):
        return False

    def fileno(self):
        raise OSError("captured stream has no file descriptor")


class ToolError(Exception):
    pass


def tool_call(name, *args):
    _call_seq[0] += 1
    call_id = _call_seq[0]
    sys.stdout.flush()
    sys.stderr.flush()
    send({"type": "tool_call", "call_id": call_id, "name": name, "args": list(args)})
    result = _tool_results.get()
    if result.get("ok"):
        return result.get("value")
    ename = result.get("ename") or "ToolError"
    evalue = result.get("evalue") or ""
    exc_type = {
        "FileNotFoundError": FileNotFoundError,
        "ValueError": ValueError,
        "RuntimeError": RuntimeError,
    }.get(ename)
    if exc_type is None:
        exc_type = type(ename, (ToolError,), {})
    raise exc_type(evalue)


class ShellError(Exception):
    pass


def shell(cmd):
    words = shlex.split(cmd)
    installs = len(words) >= 2 and (
        (words[0] in ("pip", "pip3", "conda", "mamba") and words[1] == "install")
        or (words[0].startswith("python") and "-m" in words and "pip" in words and "install" in words)
    )
    if installs and not ALLOW_NETWORK:
        raise PermissionError("package installation is disabled (network not allowed)")
    sys.stdout.flush()
    proc = subprocess.run(cmd, shell=True, capture_output=True, text=True, stdin=subprocess.DEVNULL)
    if proc.stdout:
        sys.stdout.write(proc.stdout)
    if proc.stderr:
        sys.stderr.write(proc.stderr)
    if proc.returncode != 0:
        raise ShellError("command %r exited with status %d" % (cmd, proc.returncode))


def rewrite_magics(code):
    lines = []
    for line in code.split("\n"):
        stripped = line.lstrip()
        indent = line[: len(line) - len(stripped)]
        if stripped.startswith("!"):
            lines.append(indent + "__cellwise_shell__(%r)" % stripped[1:])
        elif stripped.startswith("%pip ") or stripped.startswith("%conda "):
            lines.append(indent + "__cellwise_shell__(%r)" % stripped[1:])
        elif stripped.startswith("%matplotlib"):
            lines.append(indent + "pass")
        else:
            lines.append(line)
    return "\n".join(lines)


namespace = {"__name__": "__main__", "__builtins__": __builtins__}
namespace["__cellwise_shell__"] = shell
namespace["__cellwise_tool_call__"] = tool_call


def save_figures(cell_id):
    plt = sys.modules.get("matplotlib.pyplot")
    if plt is None:
        return
    nums = list(plt.get_fignums())
    for k, num in enumerate(nums, start=1):
        fig = plt.figure(num)
        os.makedirs(OUTPUT_DIR, exist_ok=True)
        path = "%s/%s-%d.png" % (OUTPUT_DIR, cell_id, k)
        fig.savefig(path)
        send({"type": "rich", "mime": "image/png", "text": "<Figure>", "path": path})
    if nums:
        plt.close("all")


def is_cell_file(name):
    return name.startswith("<") and name not in ("<string>", "<stdin>") and not name.startswith("<frozen")


def user_traceback(tb):
    while tb is not None and not is_cell_file(tb.tb_frame.f_code.co_filename):
        tb = tb.tb_next
    return tb


def run_cell(frame):
    cell_id = frame["cell_id"]
    filename = "<%s>" % cell_id
    code = rewrite_magics(frame["code"])
    status = "ok"
    _executing.set()
    try:
        tree = ast.parse(code, filename=filename, mode="exec")
        last = None
        if tree.body and isinstance(tree.body[-1], ast.Expr):
            last = ast.Expression(tree.body.pop().value)
        exec(compile(tree, filename, "exec"), namespace)
        if last is not None:
            value = eval(compile(last, filename, "eval"), namespace)
            if value is not None:
                namespace["_"] = value
                sys.stdout.flush()
                send({"type": "rich", "mime": "text/plain", "text": repr(value), "path": None})
    except KeyboardInterrupt:
        status = "interrupted"
        sys.stdout.flush()
        sys.stderr.flush()
        send({"type": "error", "ename": "KeyboardInterrupt", "evalue": "", "traceback": []})
    except BaseException as e:
        status = "error"
        sys.stdout.flush()
        sys.stderr.flush()
        if isinstance(e, SyntaxError):
            tb_lines = traceback.format_exception_only(type(e), e)
        else:
            tb_lines = traceback.format_exception(type(e), e, user_traceback(e.__traceback__))
        send({
            "type": "error",
            "ename": type(e).__name__,
            "evalue": str(e),
            "traceback": [l.rstrip("\n") for l in tb_lines],
        })
    finally:
        _executing.clear()
    sys.stdout.flush()
    sys.stderr.flush()
    try:
        save_figures(cell_id)
    except Exception as e:
        send({"type": "stderr", "text": "figure capture failed: %s\n" % e})
    return status


def main():
    signal.signal(signal.SIGINT, on_sigint)
    sys.stdout = Stream("stdout")
    sys.stderr = Stream("stderr")
    threading.Thread(target=reader, daemon=True).start()
    send({"type": "done", "id": None, "status": "ready"})
    while True:
        frame = _exec_queue.get()
        if frame is None:
            return
        if frame.get("type") != "exec":
            continue
        status = "interrupted"
        try:
            status = run_cell(frame)
        except KeyboardInterrupt:
            pass
        send({"type": "done", "id": frame.get("id"), "status": status})


main()
