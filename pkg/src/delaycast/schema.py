"""Column schemas shared by ingest, windowing, and the CLI.

All timestamps in files are ISO-8601 UTC. The master table is one row per
(airport, quarter hour) with the columns below; the raw-file headers mirror
the emulated source formats documented in docs/cli.md.
"""

FLIGHTS_COLUMNS = [
    "flight_id",
    "origin",
    "dest",
    "sched_off_utc",
    "act_off_utc",
    "sched_on_utc",
    "act_on_utc",
]

AIRPORT_QH_COLUMNS = [
    "airport",
    "utc_quarter",
    "arr_capacity",
    "dep_capacity",
    "sched_arr",
    "sched_dep",
    "demand_arr",
    "demand_dep",
    "throughput_arr",
    "throughput_dep",
    "ontime_arr_pct",
    "ontime_dep_pct",
    "visibility_sm",
    "ceiling_ft",
    "wind_speed_kt",
    "wind_dir_deg",
    "arr_runway_hdg",
    "dep_runway_hdg",
]

WEATHER_COLUMNS = [
    "station_id",
    "lat",
    "lon",
    "utc_hour",
    "convective_weight",
]

# variables observable only up to the forecast origin
PAST_VARS = [
    "throughput_arr",
    "throughput_dep",
    "demand_arr",
    "demand_dep",
    "ontime_arr_pct",
    "ontime_dep_pct",
    "avg_arr_delay",
    "avg_dep_delay",
    "queue_delay_arr",
    "queue_delay_dep",
]

# variables known ahead of time (schedules, capacity plans, forecasts)
KNOWN_VARS = [
    "sched_arr",
    "sched_dep",
    "cap_arr",
    "cap_dep",
    "visibility_sm",
    "ceiling_ft",
    "headwind_arr_kt",
    "crosswind_arr_kt",
    "headwind_dep_kt",
    "crosswind_dep_kt",
    "density_enroute",
    "convective_weight",
]

# the encoder sees both groups (known inputs have realized values in the past)
ENCODER_VARS = PAST_VARS + KNOWN_VARS

STATIC_VARS = ["airport", "month", "local_hour", "day_of_week"]

TARGET_VAR = "avg_arr_delay"

MASTER_COLUMNS = (
    ["airport", "utc_quarter", "month", "local_hour", "day_of_week"]
    + ["sched_arr", "sched_dep", "cap_arr", "cap_dep"]
    + ["throughput_arr", "throughput_dep", "demand_arr", "demand_dep"]
    + ["ontime_arr_pct", "ontime_dep_pct"]
    + ["avg_arr_delay", "avg_dep_delay"]
    + ["queue_delay_arr", "queue_delay_dep"]
    + ["visibility_sm", "ceiling_ft"]
    + ["headwind_arr_kt", "crosswind_arr_kt", "headwind_dep_kt", "crosswind_dep_kt"]
    + ["density_enroute", "convective_weight"]
)

FORECASTS_COLUMNS = ["airport", "origin_quarter", "horizon", "q10", "q50", "q90"]
