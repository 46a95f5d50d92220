import init, { samples, measure_program, absorb_timeline, memory_bits } from "./pkg/flowattest_web.js";

const $ = (id) => document.getElementById(id);
let lastArrivals = [];

function el(tag, text, cls) {
  const e = document.createElement(tag);
  if (text !== undefined) e.textContent = text;
  if (cls) e.className = cls;
  return e;
}

function table(headers, rows, rowClass) {
  const t = el("table");
  const head = t.insertRow();
  for (const h of headers) head.appendChild(el("th", h));
  rows.forEach((r, i) => {
    const tr = t.insertRow();
    if (rowClass) tr.className = rowClass(i);
    for (const c of r) tr.appendChild(el("td", String(c)));
  });
  return t;
}

const showPath = (p) => (p === "" ? "ε" : p);

function measure() {
  $("measure-error").textContent = "";
  for (const id of ["summary", "sessions", "rows"]) $(id).replaceChildren();
  let m;
  try {
    m = JSON.parse(measure_program($("source").value, $("input").value,
      +$("n").value, +$("l").value, +$("depth").value));
  } catch (e) {
    $("measure-error").textContent = String(e);
    return;
  }
  lastArrivals = m.arrivals;
  $("summary").append(
    el("div", `${m.program_id}: ${m.outcome}`),
    el("div", `A = ${m.authenticator}`),
    el("div", `${m.branches} branches, ${m.hashed_pairs} pairs hashed, ` +
      `${m.new_paths} new paths, ${m.repeated_paths} repeats, ${m.degraded_loops} loops past depth`));

  $("sessions").appendChild(table(
    ["session", "entry", "depth", "parent", "paths (id × count)", "indirect targets"],
    m.sessions.map((s, i) => [
      i, s.loop_entry, s.depth, s.parent ?? "-",
      s.paths.map((p) => `${showPath(p.path)}×${p.count}`).join("  "),
      s.indirect_targets.join(" "),
    ])));

  const rows = m.rows.map((r) => [
    r.cycle, r.src, r.dest, r.kind, r.owner ?? "-",
    r.entered.length ? `enter ${r.entered.join(",")}` : "",
    r.register === null ? "" : showPath(r.register),
    r.closed.map((c) => `#${c.session} ${showPath(c.path)} (${c.count})`).join(" "),
    r.exited.length ? `exit ${r.exited.join(",")}` : "",
    r.hashed || "",
  ]);
  const cls = (i) => {
    const c = m.rows[i].closed;
    if (!c.length) return "";
    return c.some((x) => x.count === 1) ? "closed-new" : "closed-repeat";
  };
  $("rows").appendChild(table(
    ["cycle", "src", "dest", "kind", "owner", "", "path register", "closed", "", "hashed"], rows, cls));
  if (m.truncated) $("rows").appendChild(el("div", `first ${m.rows.length} of ${m.branches} branches shown`));
}

function timeline() {
  $("timeline-error").textContent = "";
  $("timeline-report").replaceChildren();
  $("strip").replaceChildren();
  const buffer = +$("buffer").value;
  let t;
  try {
    t = JSON.parse(absorb_timeline($("arrivals").value, buffer));
  } catch (e) {
    $("timeline-error").textContent = String(e);
    return;
  }
  const r = t.report;
  $("timeline-report").textContent =
    `${r.absorbed} words in ${r.blocks} full blocks, done at cycle ${r.completion_cycle ?? "-"}, ` +
    `peak FIFO ${r.max_occupancy} (B = ${buffer}) ${r.overflow ? "OVERFLOW" : "ok"}`;
  const peak = Math.max(1, r.max_occupancy);
  for (const c of t.cycles) {
    const bar = el("div");
    bar.style.height = `${4 + (76 * c.occupancy) / peak}px`;
    bar.className = c.occupancy > buffer ? "over" : c.busy ? "busy" : "";
    bar.title = `cycle ${c.cycle}: fifo ${c.occupancy}, block fill ${c.fill}` +
      `${c.arrived ? ", arrival" : ""}${c.absorbed ? ", absorbed" : ""}${c.busy ? ", busy" : ""}`;
    $("strip").appendChild(bar);
  }
}

function memory() {
  const l = +$("mem-l").value;
  const depth = +$("mem-depth").value;
  $("mem-l-value").textContent = `${l} bits`;
  try {
    const bits = memory_bits(l, depth);
    const mbit = bits / 2 ** 20;
    $("memory").textContent =
      `8 × 2^${l} × ${depth} = ${bits.toLocaleString()} bits = ${mbit.toFixed(3)} Mbit = ${(bits / 8 / 1024).toLocaleString()} KiB`;
  } catch (e) {
    $("memory").textContent = String(e);
  }
}

async function main() {
  await init();
  const list = JSON.parse(samples());
  for (const s of list) $("sample").appendChild(el("option", s.name));
  const pick = () => {
    const s = list.find((x) => x.name === $("sample").value);
    $("source").value = s.source;
    $("input").value = s.input;
  };
  $("sample").addEventListener("change", () => { pick(); measure(); });
  $("measure").addEventListener("click", measure);
  $("use-measured").addEventListener("click", () => {
    $("arrivals").value = lastArrivals.join(" ");
    timeline();
  });
  $("timeline").addEventListener("click", timeline);
  $("mem-l").addEventListener("input", memory);
  $("mem-depth").addEventListener("input", memory);
  pick();
  measure();
  $("arrivals").value = lastArrivals.join(" ");
  timeline();
  memory();
}

main();
