# Two short univariate series.
@problemName Toy
@timeStamps false
@missing false
@univariate true
@equalLength true
@seriesLength 6
@classLabel true a b

@data
0.5,1.0,1.5,2.0,2.5,3.0:a
3.0,2.5,2.0,1.5,1.0,0.5:b
